from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from alignment import FusionParams, pair_similarity
from image_encoder import ImageEncoderParams, encode_image
from numerics import Parameter, Tensor
from settings import EMBED_DIM, FF_MULT, HEADS, HIDDEN_DIM, POST_LAYERS, PRE_LAYERS
from text_encoder import TextEncoderParams, encode_text


@dataclass(frozen=True)
class AblationFlags:
    no_csf: bool = False
    no_pti: bool = False
    no_tgr: bool = False
    # GCN mixes with R itself instead of softmax_rows(R)
    literal_affinity: bool = False
    fusion_floor: Optional[float] = None

    @property
    def label(self) -> str:
        names = [name for name in ("no_csf", "no_pti", "no_tgr", "literal_affinity") if getattr(self, name)]
        if self.fusion_floor is not None:
            names.append(f"fusion_floor={self.fusion_floor:g}")
        return ",".join(names) or "full"


@dataclass(frozen=True)
class ModelConfig:
    d_region: int
    d_word: int
    embed_dim: int = EMBED_DIM
    hidden_dim: int = HIDDEN_DIM
    pre_layers: int = PRE_LAYERS
    post_layers: int = POST_LAYERS
    heads: int = HEADS
    ff_mult: int = FF_MULT


@dataclass
class ModelParams:
    image: ImageEncoderParams
    text: TextEncoderParams
    fusion: FusionParams

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        rng = np.random.default_rng(seed)
        image = ImageEncoderParams.init(
            config.d_region,
            config.d_word,
            config.hidden_dim,
            config.embed_dim,
            rng,
            pre_layers=config.pre_layers,
            post_layers=config.post_layers,
            heads=config.heads,
            ff_mult=config.ff_mult,
        )
        text = TextEncoderParams.init(config.d_word, config.embed_dim, rng)
        fusion = FusionParams.init(config.embed_dim, rng)
        return cls(image=image, text=text, fusion=fusion)

    def parameters(self) -> list[Parameter]:
        return self.image.parameters() + self.text.parameters() + self.fusion.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"parameter name {p.name} registered twice")
            named[p.name] = p
        return named

    def num_weights(self) -> int:
        return sum(p.data.size for p in self.parameters())


def encode_images(images: Sequence, params: ModelParams, flags: AblationFlags) -> list[Tensor]:
    return [encode_image(img, params.image, ablate_pti=flags.no_pti) for img in images]


def encode_captions(captions: Sequence, params: ModelParams, flags: AblationFlags) -> list[Tensor]:
    return [
        encode_text(cap, params.text, ablate_tgr=flags.no_tgr, normalize=not flags.literal_affinity)
        for cap in captions
    ]


def similarity(T: Tensor, V: Tensor, params: ModelParams, flags: AblationFlags) -> Tensor:
    """s(caption, image) with the switches in ``flags`` applied"""
    return pair_similarity(T, V, params.fusion, ablate_csf=flags.no_csf, floor=flags.fusion_floor)
