# 行是 caption，列是 image；分数相同时下标小的排在前面

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from log import logger
from model import AblationFlags, ModelParams, encode_captions, encode_images, similarity
from numerics import DimensionError
from settings import EVAL_WORKERS, RECALL_KS

TEXT_RETRIEVAL = "text_retrieval"
IMAGE_RETRIEVAL = "image_retrieval"
DIRECTIONS = (TEXT_RETRIEVAL, IMAGE_RETRIEVAL)

RSUM_LABEL = "rSum"
DESK_RSUM_LABEL = "desk-rSum"


class RecallError(ValueError):
    """K outside 1..number of candidates"""


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    ground_truth: Sequence[int]

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth, dtype=np.int64)
        if self.scores.ndim != 2:
            raise DimensionError(f"similarity matrix must be 2-d, got shape {self.scores.shape}")
        if self.ground_truth.shape != (self.scores.shape[0],):
            raise DimensionError(
                f"{self.ground_truth.shape[0]} ground-truth entries for {self.scores.shape[0]} captions"
            )
        bad = np.flatnonzero((self.ground_truth < 0) | (self.ground_truth >= self.scores.shape[1]))
        if bad.size:
            raise DimensionError(f"caption {int(bad[0])} maps to missing image column {int(self.ground_truth[bad[0]])}")

    @property
    def num_captions(self) -> int:
        return self.scores.shape[0]

    @property
    def num_images(self) -> int:
        return self.scores.shape[1]

    def candidates(self, direction: str) -> int:
        if direction == TEXT_RETRIEVAL:
            return self.num_captions
        if direction == IMAGE_RETRIEVAL:
            return self.num_images
        raise ValueError(f"unknown retrieval direction {direction!r}")


def _ranking(values: np.ndarray) -> np.ndarray:
    # stable sort on the negated scores keeps the lower index first among ties
    return np.argsort(-values, kind="stable")


def recall_at_k(S: SimilarityMatrix, direction: str, k: int) -> float:
    """Percentage of queries whose ground truth is among the top ``k`` candidates"""
    candidates = S.candidates(direction)
    if k < 1 or k > candidates:
        raise RecallError(f"R@{k} needs 1 <= K <= {candidates} ({direction})")

    if direction == IMAGE_RETRIEVAL:
        hits = sum(int(S.ground_truth[c] in _ranking(S.scores[c])[:k]) for c in range(S.num_captions))
        queries = S.num_captions
    else:
        hits = 0
        for j in range(S.num_images):
            top = _ranking(S.scores[:, j])[:k]
            hits += int(np.any(S.ground_truth[top] == j))
        queries = S.num_images
    return 100.0 * hits / queries


def rsum(*values: float) -> float:
    return round(math.fsum(values), 10)


@dataclass
class MetricsReport:
    """Recalls keyed by K; a K the split is too small for is absent"""

    text_retrieval: dict = field(default_factory=dict)
    image_retrieval: dict = field(default_factory=dict)
    rsum: float = 0.0
    label: str = RSUM_LABEL

    @property
    def complete(self) -> bool:
        return self.label == RSUM_LABEL

    def to_dict(self) -> dict:
        record = {}
        for k in RECALL_KS:
            record[f"i2t_r{k}"] = self.text_retrieval.get(k)
            record[f"t2i_r{k}"] = self.image_retrieval.get(k)
        record["rsum"] = self.rsum
        record["rsum_label"] = self.label
        return record


def metrics_report(S: SimilarityMatrix, ks: Sequence[int] = RECALL_KS) -> MetricsReport:
    """Both directions' recalls and their sum.

    When some K exceeds the candidates of either direction only the feasible
    K are reported and their sum is scaled up to the six-recall range,
    labelled ``desk-rSum``.
    """
    limit = min(S.candidates(d) for d in DIRECTIONS)
    feasible = [k for k in ks if k <= limit]
    if not feasible:
        raise RecallError(f"no K in {list(ks)} fits {limit} candidates")

    report = MetricsReport()
    for k in feasible:
        report.text_retrieval[k] = recall_at_k(S, TEXT_RETRIEVAL, k)
        report.image_retrieval[k] = recall_at_k(S, IMAGE_RETRIEVAL, k)
    values = list(report.text_retrieval.values()) + list(report.image_retrieval.values())
    if len(feasible) == len(ks):
        report.rsum = rsum(*values)
    else:
        report.rsum = round(rsum(*values) * len(ks) / len(feasible), 10)
        report.label = DESK_RSUM_LABEL
    return report


def similarity_matrix(
    dataset, params: ModelParams, flags: Optional[AblationFlags] = None, workers: int = EVAL_WORKERS
) -> SimilarityMatrix:
    """Score every caption against every image with frozen parameters"""
    flags = flags or AblationFlags()
    V = encode_images(dataset.images, params, flags)
    T = encode_captions(dataset.captions, params, flags)

    def row(c: int) -> np.ndarray:
        return np.array([similarity(T[c], V_j, params, flags).item() for V_j in V])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(row, range(len(T))))
    else:
        rows = [row(c) for c in range(len(T))]
    return SimilarityMatrix(np.stack(rows), dataset.ground_truth())


def evaluate_split(
    dataset, params: ModelParams, flags: Optional[AblationFlags] = None, workers: int = EVAL_WORKERS
) -> MetricsReport:
    S = similarity_matrix(dataset, params, flags, workers)
    report = metrics_report(S)
    logger.info(
        f"Evaluated {S.num_captions} captions x {S.num_images} images "
        f"[{(flags or AblationFlags()).label}]: {report.label} {report.rsum:.2f}"
    )
    if not report.complete:
        skipped = ", ".join(f"R@{k}" for k in RECALL_KS if k not in report.image_retrieval)
        logger.debug(f"{skipped} skipped: the split has fewer candidates than K")
    return report
