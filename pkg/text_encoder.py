from dataclasses import dataclass

import numpy as np

from numerics import DimensionError, Parameter, Tensor, row_softmax, uniform_parameter


@dataclass
class TextEncoderParams:
    W_embed: Parameter
    W_phi: Parameter
    W_psi: Parameter
    gcn_W_g: Parameter
    gcn_W_r: Parameter

    @classmethod
    def init(cls, d_word: int, embed_dim: int, rng: np.random.Generator) -> "TextEncoderParams":
        square = (embed_dim, embed_dim)
        return cls(
            W_embed=uniform_parameter("text.embed.W", (d_word, embed_dim), rng),
            W_phi=uniform_parameter("text.affinity.W_phi", square, rng),
            W_psi=uniform_parameter("text.affinity.W_psi", square, rng),
            gcn_W_g=uniform_parameter("text.gcn.W_g", square, rng),
            gcn_W_r=uniform_parameter("text.gcn.W_r", square, rng),
        )

    def parameters(self) -> list[Parameter]:
        return [self.W_embed, self.W_phi, self.W_psi, self.gcn_W_g, self.gcn_W_r]


def embed_words(words: Tensor, params: TextEncoderParams) -> Tensor:
    return words @ params.W_embed


def affinity_matrix(s_hat: Tensor, params: TextEncoderParams) -> Tensor:
    """R[i, j] = (W_phi w_i) . (W_psi w_j); not symmetric in general"""
    return (s_hat @ params.W_phi) @ (s_hat @ params.W_psi).T


def gcn_residual(s_hat: Tensor, R: Tensor, params: TextEncoderParams, normalize: bool = True) -> Tensor:
    n = s_hat.shape[0]
    if R.shape != (n, n):
        raise DimensionError(f"affinity {R.shape} does not match {n} words")
    mixing = row_softmax(R) if normalize else R
    return ((mixing @ s_hat) @ params.gcn_W_g) @ params.gcn_W_r + s_hat


def encode_text(cap, params: TextEncoderParams, ablate_tgr: bool = False, normalize: bool = True) -> Tensor:
    """CaptionFeatures -> T [n x D]; ``ablate_tgr`` returns the embedded words unchanged"""
    s_hat = embed_words(Tensor(cap.words), params)
    if ablate_tgr:
        return s_hat
    return gcn_residual(s_hat, affinity_matrix(s_hat, params), params, normalize=normalize)
