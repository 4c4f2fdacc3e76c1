# 区域与显著词的门控融合，以及图文相似度

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from image_encoder import encode_image
from numerics import (
    DimensionError,
    Parameter,
    Tensor,
    concat,
    cosine_similarity_matrix,
    max_over_axis,
    reshape,
    take_rows,
    uniform_parameter,
)
from text_encoder import encode_text

NO_WORD = "none"


@dataclass
class FusionParams:
    W_g: Parameter
    W_h: Parameter

    @classmethod
    def init(cls, embed_dim: int, rng: np.random.Generator) -> "FusionParams":
        shape = (2 * embed_dim, embed_dim)
        return cls(W_g=uniform_parameter("gate.W_g", shape, rng), W_h=uniform_parameter("gate.W_h", shape, rng))

    def parameters(self) -> list[Parameter]:
        return [self.W_g, self.W_h]


class Fusion(NamedTuple):
    fused: Tensor
    gate: Tensor
    word_index: np.ndarray
    word_similarity: np.ndarray
    is_fused: np.ndarray


def prominent_fragment(query, candidates) -> tuple[int, float]:
    """Index (first on ties) and cosine of the candidate row closest to ``query``"""
    query = query if isinstance(query, Tensor) else Tensor(query)
    candidates = candidates if isinstance(candidates, Tensor) else Tensor(candidates)
    if candidates.ndim != 2 or candidates.shape[0] == 0:
        raise DimensionError("prominent_fragment: no candidates")
    cos = cosine_similarity_matrix(Tensor(query.data.reshape(1, -1), dtype=query.dtype), candidates)
    k = int(np.argmax(cos.data[0]))
    return k, float(cos.data[0, k])


def fuse(V: Tensor, T: Tensor, params: FusionParams, floor: Optional[float] = None) -> Fusion:
    """Gated fusion of every region with its prominent word.

    With a ``floor``, regions whose best cosine falls below it are left
    unfused (v* = v).
    """
    if T.shape[0] < 1:
        raise DimensionError("gated_fusion: caption has no words")
    if V.shape[1] != T.shape[1] or params.W_g.shape[0] != 2 * V.shape[1]:
        raise DimensionError(f"gated_fusion: V {V.shape}, T {T.shape}, W_g {params.W_g.shape} do not agree")
    best, k = max_over_axis(cosine_similarity_matrix(V, T), axis=1)
    joint = concat([V, take_rows(T, k)], axis=1)
    gate = (joint @ params.W_g).sigmoid()
    fused = gate * V + (1.0 - gate) * (joint @ params.W_h).tanh()
    is_fused = np.ones(V.shape[0], dtype=bool)
    if floor is not None:
        is_fused = best.data >= floor
        keep = Tensor(is_fused[:, None].astype(V.dtype), dtype=V.dtype)
        fused = keep * fused + (1.0 - keep) * V
    return Fusion(fused, gate, k, best.data.astype(np.float64), is_fused)


def gated_fusion(V: Tensor, T: Tensor, params: FusionParams, floor: Optional[float] = None) -> Tensor:
    return fuse(V, T, params, floor).fused


def word_image_similarity(t, V: Tensor, V_star: Tensor) -> Tensor:
    """max_j cos(t, v_j) + max_j cos(t, v*_j)"""
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.ndim == 1:
        t = reshape(t, (1, -1))
    return text_image_similarity(t, V, V_star)


def text_image_similarity(T: Tensor, V: Tensor, V_star: Optional[Tensor], ablate_csf: bool = False) -> Tensor:
    """Sum over words of the word/image similarity.

    ``ablate_csf`` scores words against V alone, doubled to keep the scale.
    """
    first, _ = max_over_axis(cosine_similarity_matrix(T, V), axis=1)
    if ablate_csf:
        return (first * 2.0).sum()
    second, _ = max_over_axis(cosine_similarity_matrix(T, V_star), axis=1)
    return (first + second).sum()


def pair_similarity(
    T: Tensor, V: Tensor, params: FusionParams, ablate_csf: bool = False, floor: Optional[float] = None
) -> Tensor:
    if ablate_csf:
        return text_image_similarity(T, V, None, ablate_csf=True)
    return text_image_similarity(T, V, gated_fusion(V, T, params, floor))


@dataclass
class AlignmentReport:
    caption_id: str
    image_id: str
    tokens: list
    regions: list = field(default_factory=list)
    words: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def alignment_report(cap, img, params, flags) -> AlignmentReport:
    """Which word each region fused with, and which region each word matched in V and V*"""
    V = encode_image(img, params.image, ablate_pti=flags.no_pti)
    T = encode_text(cap, params.text, ablate_tgr=flags.no_tgr, normalize=not flags.literal_affinity)
    fusion = fuse(V, T, params.fusion, flags.fusion_floor)

    report = AlignmentReport(caption_id=cap.id, image_id=img.id, tokens=list(cap.tokens))
    for i in range(V.shape[0]):
        k = int(fusion.word_index[i])
        fused = bool(fusion.is_fused[i])
        report.regions.append(
            {
                "region": i,
                "word": cap.tokens[k] if fused else NO_WORD,
                "word_index": k if fused else None,
                "similarity": float(fusion.word_similarity[i]),
            }
        )

    cos_v = cosine_similarity_matrix(T, V).data
    cos_star = cosine_similarity_matrix(T, fusion.fused).data
    for j, token in enumerate(cap.tokens):
        region_v = int(np.argmax(cos_v[j]))
        region_star = int(np.argmax(cos_star[j]))
        report.words.append(
            {
                "word_index": j,
                "token": token,
                "region_v": region_v,
                "similarity_v": float(cos_v[j, region_v]),
                "region_v_star": region_star,
                "similarity_v_star": float(cos_star[j, region_star]),
            }
        )
    return report
