from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from alignment import FusionParams, gated_fusion, text_image_similarity
from dataio import Batch, CaptionFeatures, ImageFeatures
from image_encoder import ImageEncoderParams, encode_image, region_inputs, region_projection
from log import logger
from model import AblationFlags, ModelConfig, ModelParams
from numerics import (
    NumericError,
    Parameter,
    Precision,
    Tensor,
    concat,
    cosine_similarity_matrix,
    finite_difference_check,
    gather,
    layer_norm,
    max_over_axis,
    reshape,
    row_softmax,
    slice_cols,
    stack,
    take_rows,
)
from settings import GRADCHECK_COORDINATES, GRADCHECK_INSTANCES, GRADCHECK_STEP, GRADCHECK_TOL
from text_encoder import TextEncoderParams, encode_text
from training import batch_similarity, triplet_loss_hard

# small enough to keep every case fast, wide enough for two heads
D_REGION, D_WORD, WIDTH, HEADS = 4, 3, 4, 2
HIDDEN = 2 * WIDTH
# large enough that every hinge of the loss is active
LOSS_MARGIN = 20.0
MAX_REDRAWS = 100


@dataclass
class CaseResult:
    name: str
    instances: int = 0
    checked: int = 0
    max_rel_error: float = 0.0
    worst: str = ""
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclass
class SuiteReport:
    seed: int
    cases: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(case.passed for case in self.cases)

    @property
    def max_rel_error(self) -> float:
        return max((case.max_rel_error for case in self.cases), default=0.0)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "passed": self.passed,
            "max_rel_error": self.max_rel_error,
            "cases": [
                {
                    "name": case.name,
                    "instances": case.instances,
                    "checked": case.checked,
                    "max_rel_error": case.max_rel_error,
                    "worst": case.worst,
                    "failures": case.failures[:5],
                }
                for case in self.cases
            ],
        }


def _param(name: str, rng: np.random.Generator, *shape) -> Parameter:
    return Parameter(name, rng.normal(size=shape))


def _reduced(out: Callable[[], Tensor], rng: np.random.Generator, shape: tuple) -> Callable[[], Tensor]:
    direction = Tensor(rng.normal(size=shape))
    return lambda: (out() * direction).sum()


def _random_image(rng: np.random.Generator, m: int = 3, image_id: str = "img") -> ImageFeatures:
    corners = rng.uniform(0, 50, size=(m, 2))
    sizes = rng.uniform(5, 50, size=(m, 2))
    boxes = np.concatenate([corners, corners + sizes], axis=1)
    labels = [rng.normal(size=(int(rng.integers(0, 3)), D_WORD)) for _ in range(m)]
    return ImageFeatures(image_id, rng.normal(size=(m, D_REGION)), boxes, (100, 100), labels)


def _random_caption(rng: np.random.Generator, n: int = 3, caption_id: str = "cap", image_id: str = "img") -> CaptionFeatures:
    return CaptionFeatures(caption_id, image_id, rng.normal(size=(n, D_WORD)), [f"w{j}" for j in range(n)])


def _small_model(rng: np.random.Generator) -> ModelParams:
    config = ModelConfig(D_REGION, D_WORD, embed_dim=WIDTH, hidden_dim=HIDDEN, heads=HEADS)
    params = ModelParams.init(config, int(rng.integers(2**31)))
    _scatter_layer_norms(params.image, rng)
    return params


def _scatter_layer_norms(params: ImageEncoderParams, rng: np.random.Generator) -> None:
    """LayerNorm gains around 1 and biases around 0 instead of exactly 1 and 0"""
    for layer in params.pre + params.post:
        for gain in (layer.ln1_gain, layer.ln2_gain):
            gain.data = 1.0 + 0.5 * rng.normal(size=gain.shape)
        for bias in (layer.ln1_bias, layer.ln2_bias):
            bias.data = 0.5 * rng.normal(size=bias.shape)


def _live_image(rng: np.random.Generator, params: ImageEncoderParams, image_id: str = "img") -> ImageFeatures:
    """Random image with at least one active projection unit per region"""
    for _ in range(MAX_REDRAWS):
        img = _random_image(rng, image_id=image_id)
        x = np.concatenate([t.data for t in region_inputs(img, params)], axis=1) @ params.W_r.data
        if np.all((x > 0).any(axis=1)):
            return img
    raise NumericError(f"no image with live region projections in {MAX_REDRAWS} draws")


# --------------------------------------------------------------------------
# cases: each returns (scalar function, parameters to check)
# --------------------------------------------------------------------------


def case_matmul(rng):
    a, b = _param("a", rng, 3, 4), _param("b", rng, 4, 2)
    return _reduced(lambda: a @ b, rng, (3, 2)), [a, b]


def case_relu(rng):
    x = _param("x", rng, 4, 5)
    return _reduced(lambda: x.relu(), rng, (4, 5)), [x]


def case_tanh(rng):
    x = _param("x", rng, 4, 5)
    return _reduced(lambda: x.tanh(), rng, (4, 5)), [x]


def case_sigmoid(rng):
    x = _param("x", rng, 4, 5)
    return _reduced(lambda: x.sigmoid(), rng, (4, 5)), [x]


def case_row_softmax(rng):
    x = _param("x", rng, 3, 4)
    return _reduced(lambda: row_softmax(x), rng, (3, 4)), [x]


def case_layer_norm(rng):
    x, gain, bias = _param("x", rng, 3, 5), _param("gain", rng, 5), _param("bias", rng, 5)
    return _reduced(lambda: layer_norm(x, gain, bias), rng, (3, 5)), [x, gain, bias]


def case_max_over_axis(rng):
    x = _param("x", rng, 4, 5)
    rows = _reduced(lambda: max_over_axis(x, axis=1)[0], rng, (4,))
    cols = _reduced(lambda: max_over_axis(x, axis=0)[0], rng, (5,))
    return (lambda: rows() + cols()), [x]


def case_cosine(rng):
    a, b = _param("a", rng, 3, 4), _param("b", rng, 5, 4)
    return _reduced(lambda: cosine_similarity_matrix(a, b), rng, (3, 5)), [a, b]


def case_structural(rng):
    a, b = _param("a", rng, 3, 2), _param("b", rng, 3, 4)

    def out():
        x = concat([a, b], axis=1)
        x = take_rows(x, [2, 0, 2, 1])
        y = stack([x.sum(), gather(x, [0, 3], [5, 1]).sum()])
        return reshape(slice_cols(x, 1, 4).T, (-1,)) * y.sum()

    return _reduced(out, rng, (12,)), [a, b]


def case_region_projection(rng):
    params = ImageEncoderParams.init(D_REGION, D_WORD, WIDTH, WIDTH, rng, heads=HEADS)
    regions, spatial, semantic = (Tensor(rng.normal(size=(3, d))) for d in (D_REGION, 6, D_WORD))
    return _reduced(lambda: region_projection(regions, spatial, semantic, params), rng, (3, WIDTH)), [
        params.W_r,
        params.W_v,
    ]


def case_encode_image(rng):
    params = ImageEncoderParams.init(D_REGION, D_WORD, HIDDEN, WIDTH, rng, heads=HEADS)
    _scatter_layer_norms(params, rng)
    img = _live_image(rng, params)
    return _reduced(lambda: encode_image(img, params), rng, (img.m, WIDTH)), params.parameters()


def case_encode_text(rng):
    params = TextEncoderParams.init(D_WORD, WIDTH, rng)
    cap = _random_caption(rng)
    return _reduced(lambda: encode_text(cap, params), rng, (cap.n, WIDTH)), params.parameters()


def case_gated_fusion(rng):
    params = FusionParams.init(WIDTH, rng)
    V, T = _param("V", rng, 3, WIDTH), _param("T", rng, 4, WIDTH)
    return _reduced(lambda: gated_fusion(V, T, params), rng, (3, WIDTH)), [V, T] + params.parameters()


def case_text_image_similarity(rng):
    T, V, V_star = _param("T", rng, 4, WIDTH), _param("V", rng, 3, WIDTH), _param("V_star", rng, 3, WIDTH)
    return (lambda: text_image_similarity(T, V, V_star)), [T, V, V_star]


def case_full_loss(rng):
    params = _small_model(rng)
    images = [_live_image(rng, params.image, image_id=f"img{i}") for i in range(3)]
    captions = [_random_caption(rng, caption_id=f"cap{i}", image_id=f"img{i}") for i in range(3)]
    batch = Batch(captions=captions, images=images, image_index=[0, 1, 2])
    flags = AblationFlags()
    return (lambda: triplet_loss_hard(batch_similarity(batch, params, flags), LOSS_MARGIN)), params.parameters()


CASES = {
    "matmul": case_matmul,
    "relu": case_relu,
    "tanh": case_tanh,
    "sigmoid": case_sigmoid,
    "row_softmax": case_row_softmax,
    "layer_norm": case_layer_norm,
    "max_over_axis": case_max_over_axis,
    "cosine_similarity_matrix": case_cosine,
    "concat/take_rows/gather/stack": case_structural,
    "region_projection": case_region_projection,
    "encode_image": case_encode_image,
    "encode_text": case_encode_text,
    "gated_fusion": case_gated_fusion,
    "text_image_similarity": case_text_image_similarity,
    "triplet_loss_hard(batch_similarity)": case_full_loss,
}


def run_case(name: str, seed: int, instances: int, coordinates: int) -> CaseResult:
    result = CaseResult(name)
    build = CASES[name]
    case_index = list(CASES).index(name)
    for instance in range(instances):
        rng = np.random.default_rng([seed, case_index, instance])
        f, params = build(rng)
        report = finite_difference_check(
            f, params, h=GRADCHECK_STEP, tol=GRADCHECK_TOL, samples=coordinates, seed=int(rng.integers(2**31))
        )
        result.instances += 1
        result.checked += report.checked
        if report.max_rel_error > result.max_rel_error:
            result.max_rel_error = report.max_rel_error
            result.worst = f"instance {instance}: {report.worst}"
        result.failures.extend(f"instance {instance}: {failure}" for failure in report.failures)
    return result


def run_suite(
    seed: int = 0, instances: int = GRADCHECK_INSTANCES, coordinates: int = GRADCHECK_COORDINATES
) -> SuiteReport:
    if Precision().dtype != np.float64:
        logger.warning(f"Gradient check runs in float64, not {Precision().dtype}")
    suite = SuiteReport(seed=seed)
    with Precision().use("float64"):
        for name in CASES:
            result = run_case(name, seed, instances, coordinates)
            suite.cases.append(result)
            status = "ok" if result.passed else f"FAILED ({len(result.failures)} coordinates)"
            logger.info(f"{name}: {result.checked} coordinates, max rel error {result.max_rel_error:.3e} {status}")
    return suite
