import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from numerics import (
    DimensionError,
    Parameter,
    Tensor,
    concat,
    layer_norm,
    row_softmax,
    slice_cols,
    uniform_parameter,
)
from utils import ConfigError

SPATIAL_DIM = 6


@dataclass
class TransformerLayerParams:
    W_q: Parameter
    W_k: Parameter
    W_v: Parameter
    W_o: Parameter
    W_1: Parameter
    W_2: Parameter
    ln1_gain: Parameter
    ln1_bias: Parameter
    ln2_gain: Parameter
    ln2_bias: Parameter

    @classmethod
    def init(cls, prefix: str, width: int, ff_width: int, rng: np.random.Generator) -> "TransformerLayerParams":
        square = {key: uniform_parameter(f"{prefix}.attn.{key}", (width, width), rng) for key in ("W_q", "W_k", "W_v", "W_o")}
        return cls(
            **square,
            W_1=uniform_parameter(f"{prefix}.ff.W_1", (width, ff_width), rng),
            W_2=uniform_parameter(f"{prefix}.ff.W_2", (ff_width, width), rng),
            ln1_gain=Parameter(f"{prefix}.ln1.gain", np.ones(width)),
            ln1_bias=Parameter(f"{prefix}.ln1.bias", np.zeros(width)),
            ln2_gain=Parameter(f"{prefix}.ln2.gain", np.ones(width)),
            ln2_bias=Parameter(f"{prefix}.ln2.bias", np.zeros(width)),
        )

    def parameters(self) -> list[Parameter]:
        return [
            self.W_q,
            self.W_k,
            self.W_v,
            self.W_o,
            self.W_1,
            self.W_2,
            self.ln1_gain,
            self.ln1_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]


@dataclass
class ImageEncoderParams:
    d_region: int
    d_word: int
    heads: int
    W_r: Parameter
    W_v: Parameter
    W_proj: Parameter
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)

    @classmethod
    def init(
        cls,
        d_region: int,
        d_word: int,
        hidden_dim: int,
        embed_dim: int,
        rng: np.random.Generator,
        pre_layers: int = 1,
        post_layers: int = 1,
        heads: int = 2,
        ff_mult: int = 2,
    ) -> "ImageEncoderParams":
        if hidden_dim % heads or embed_dim % heads:
            raise ConfigError(f"hidden_dim={hidden_dim} and embed_dim={embed_dim} must be divisible by heads={heads}")
        d_in = d_region + SPATIAL_DIM + d_word
        return cls(
            d_region=d_region,
            d_word=d_word,
            heads=heads,
            W_r=uniform_parameter("image.proj.W_r", (d_in, hidden_dim), rng),
            W_v=uniform_parameter("image.proj.W_v", (hidden_dim, hidden_dim), rng),
            pre=[
                TransformerLayerParams.init(f"image.pre.{i}", hidden_dim, ff_mult * hidden_dim, rng)
                for i in range(pre_layers)
            ],
            W_proj=uniform_parameter("image.linear.W", (hidden_dim, embed_dim), rng),
            post=[
                TransformerLayerParams.init(f"image.post.{i}", embed_dim, ff_mult * embed_dim, rng)
                for i in range(post_layers)
            ],
        )

    def parameters(self) -> list[Parameter]:
        params = [self.W_r, self.W_v]
        for layer in self.pre:
            params.extend(layer.parameters())
        params.append(self.W_proj)
        for layer in self.post:
            params.extend(layer.parameters())
        return params


def spatial_features(box: Sequence[float], image_size: Sequence[float]) -> np.ndarray:
    """[x1/w, y1/h, x2/w, y2/h, (x2-x1)/w, (y2-y1)/h]"""
    w, h = float(image_size[0]), float(image_size[1])
    if w == 0 or h == 0:
        raise ValueError(f"image size {w:g}x{h:g} has a zero side")
    x1, y1, x2, y2 = (float(v) for v in box)
    return np.array([x1 / w, y1 / h, x2 / w, y2 / h, (x2 - x1) / w, (y2 - y1) / h])


def spatial_feature_matrix(boxes: np.ndarray, image_size: Sequence[float]) -> np.ndarray:
    return np.stack([spatial_features(box, image_size) for box in boxes])


def label_semantic_feature(label_words: Sequence, d_word: int) -> np.ndarray:
    """Elementwise max over a region's label word vectors; zeros when it has none"""
    label_words = np.asarray(label_words, dtype=np.float64).reshape(-1, d_word)
    if label_words.shape[0] == 0:
        return np.zeros(d_word)
    return label_words.max(axis=0)


def region_projection(regions: Tensor, spatial: Tensor, semantic: Tensor, params: ImageEncoderParams) -> Tensor:
    """W_v(ReLU(W_r [r, rs, rt])) for every row, weights shared across regions"""
    x = concat([regions, spatial, semantic], axis=1)
    if x.shape[1] != params.W_r.shape[0]:
        raise DimensionError(
            f"region input width {x.shape[1]} (regions {regions.shape[1]} + spatial {spatial.shape[1]} + "
            f"labels {semantic.shape[1]}) does not match W_r {params.W_r.shape}"
        )
    return (x @ params.W_r).relu() @ params.W_v


def self_attention(x: Tensor, layer: TransformerLayerParams, heads: int) -> Tensor:
    q, k, v = x @ layer.W_q, x @ layer.W_k, x @ layer.W_v
    width = x.shape[1] // heads
    scale = 1.0 / math.sqrt(width)
    outputs = []
    for head in range(heads):
        lo, hi = head * width, (head + 1) * width
        q_h, k_h, v_h = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        weights = row_softmax((q_h @ k_h.T) * scale)
        outputs.append(weights @ v_h)
    return concat(outputs, axis=1) @ layer.W_o


def transformer_layer(x: Tensor, layer: TransformerLayerParams, heads: int) -> Tensor:
    """Pre-norm encoder layer: x + MHA(LN(x)), then x + FFN(LN(x))"""
    x = x + self_attention(layer_norm(x, layer.ln1_gain, layer.ln1_bias), layer, heads)
    hidden = (layer_norm(x, layer.ln2_gain, layer.ln2_bias) @ layer.W_1).relu()
    return x + hidden @ layer.W_2


def region_inputs(img, params: ImageEncoderParams, ablate_pti: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    spatial = spatial_feature_matrix(img.boxes, img.image_size)
    if ablate_pti:
        semantic = np.zeros((img.m, params.d_word))
    else:
        semantic = np.stack([label_semantic_feature(words, params.d_word) for words in img.label_words])
    return Tensor(img.regions), Tensor(spatial), Tensor(semantic)


def encode_image(img, params: ImageEncoderParams, ablate_pti: bool = False) -> Tensor:
    """ImageFeatures -> V [m x D]; ``ablate_pti`` replaces every pooled label vector by zeros"""
    regions, spatial, semantic = region_inputs(img, params, ablate_pti)
    x = region_projection(regions, spatial, semantic, params)
    for layer in params.pre:
        x = transformer_layer(x, layer, params.heads)
    x = x @ params.W_proj
    for layer in params.post:
        x = transformer_layer(x, layer, params.heads)
    return x
