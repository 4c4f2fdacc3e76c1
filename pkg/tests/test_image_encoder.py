import numpy as np
import pytest

from dataio import ImageFeatures
from image_encoder import (
    ImageEncoderParams,
    encode_image,
    label_semantic_feature,
    region_inputs,
    region_projection,
    spatial_features,
    transformer_layer,
)
from numerics import DimensionError, Tensor, layer_norm
from utils import ConfigError


def random_image(rng, m=5, d_region=6, d_word=5, image_id="img"):
    corners = rng.uniform(0, 40, size=(m, 2))
    boxes = np.concatenate([corners, corners + rng.uniform(1, 40, size=(m, 2))], axis=1)
    labels = [rng.normal(size=(int(rng.integers(0, 3)), d_word)) for _ in range(m)]
    return ImageFeatures(image_id, rng.normal(size=(m, d_region)), boxes, (100.0, 100.0), labels)


def permuted(img, order):
    return ImageFeatures(img.id, img.regions[order], img.boxes[order], img.image_size, [img.label_words[i] for i in order])


@pytest.fixture
def params(f64, rng):
    return ImageEncoderParams.init(6, 5, hidden_dim=8, embed_dim=4, rng=rng, heads=2)


@pytest.mark.parametrize(
    "box, size, expected",
    [
        ((0, 0, 640, 480), (640, 480), [0, 0, 1, 1, 1, 1]),
        ((160, 120, 320, 240), (640, 480), [0.25, 0.25, 0.5, 0.5, 0.25, 0.25]),
        ((100, 100, 100, 100), (200, 200), [0.5, 0.5, 0.5, 0.5, 0, 0]),
    ],
)
def test_spatial_features(box, size, expected):
    assert np.allclose(spatial_features(box, size), expected)


def test_spatial_features_zero_side():
    with pytest.raises(ValueError):
        spatial_features((0, 0, 1, 1), (0, 10))


def test_label_semantic_feature():
    assert np.array_equal(label_semantic_feature([[1, -2], [0, 5]], 2), [1, 5])
    assert np.array_equal(label_semantic_feature([[0.3, -0.4]], 2), [0.3, -0.4])
    assert np.array_equal(label_semantic_feature([], 2), [0, 0])


def test_region_projection_zero_weights(params, rng):
    params.W_r.data[:] = 0
    inputs = [Tensor(rng.normal(size=(3, d))) for d in (6, 6, 5)]
    assert np.array_equal(region_projection(*inputs, params).data, np.zeros((3, 8)))


def test_region_projection_identity_on_nonnegative_inputs(f64, rng):
    params = ImageEncoderParams.init(2, 2, hidden_dim=10, embed_dim=2, rng=rng, heads=2)
    params.W_r.data = np.eye(10)
    params.W_v.data = np.eye(10)
    r, rs, rt = (Tensor(rng.uniform(0, 1, size=(3, d))) for d in (2, 6, 2))
    expected = np.concatenate([r.data, rs.data, rt.data], axis=1)
    assert np.allclose(region_projection(r, rs, rt, params).data, expected)


def test_region_projection_width_mismatch(params, rng):
    with pytest.raises(DimensionError):
        region_projection(Tensor(np.zeros((3, 7))), Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 5))), params)


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigError):
        ImageEncoderParams.init(6, 5, hidden_dim=9, embed_dim=4, rng=rng, heads=2)


def test_encode_image_shape(params, rng):
    for m in (1, 2, 7):
        assert encode_image(random_image(rng, m=m), params).shape == (m, 4)


def test_encode_image_permutation_equivariant(params, rng):
    img = random_image(rng)
    order = rng.permutation(img.m)
    V = encode_image(img, params).data
    assert np.allclose(encode_image(permuted(img, order), params).data, V[order], atol=1e-5)


def test_ablate_pti_ignores_labels(params, rng):
    img = random_image(rng)
    relabelled = ImageFeatures(img.id, img.regions, img.boxes, img.image_size, [rng.normal(size=(2, 5)) for _ in range(img.m)])
    assert np.array_equal(encode_image(img, params, ablate_pti=True).data, encode_image(relabelled, params, ablate_pti=True).data)
    assert not np.allclose(encode_image(img, params).data, encode_image(relabelled, params).data)


def test_single_region_with_zero_transformer_weights(params, rng):
    for layer in params.pre + params.post:
        for p in (layer.W_q, layer.W_k, layer.W_v, layer.W_o, layer.W_1, layer.W_2):
            p.data[:] = 0
    img = random_image(rng, m=1)
    r, rs, rt = region_inputs(img, params)

    # residual paths only: every layer passes its input through unchanged
    x = np.concatenate([r.data, rs.data, rt.data], axis=1)
    expected = np.maximum(x @ params.W_r.data, 0) @ params.W_v.data @ params.W_proj.data
    assert np.allclose(encode_image(img, params).data, expected)


def test_transformer_layer_matches_hand_computation(f64, rng):
    params = ImageEncoderParams.init(2, 2, hidden_dim=4, embed_dim=4, rng=rng, heads=1)
    layer = params.pre[0]
    x = rng.normal(size=(3, 4))

    def ln(z, gain, bias):
        mu = z.mean(axis=1, keepdims=True)
        var = ((z - mu) ** 2).mean(axis=1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-6) * gain.data + bias.data

    h = ln(x, layer.ln1_gain, layer.ln1_bias)
    q, k, v = h @ layer.W_q.data, h @ layer.W_k.data, h @ layer.W_v.data
    logits = q @ k.T / 2.0
    weights = np.exp(logits - logits.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    y = x + weights @ v @ layer.W_o.data
    expected = y + np.maximum(ln(y, layer.ln2_gain, layer.ln2_bias) @ layer.W_1.data, 0) @ layer.W_2.data

    assert np.allclose(transformer_layer(Tensor(x), layer, heads=1).data, expected)
    assert np.allclose(layer_norm(Tensor(x), layer.ln1_gain, layer.ln1_bias).data, h)
