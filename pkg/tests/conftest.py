import numpy as np
import pytest

from dataio import SyntheticSpec, gen_synthetic, load_dataset
from model import ModelConfig, ModelParams
from numerics import Precision

TINY_SPEC = dict(num_images=4, captions_per_image=2, m=4, n=4, d_region=6, d_word=5, concepts=2, noise=0.05, seed=3)


@pytest.fixture
def f64():
    with Precision().use("float64") as precision:
        yield precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    return gen_synthetic(SyntheticSpec(**TINY_SPEC), tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_root):
    return load_dataset(tiny_root)


@pytest.fixture
def tiny_config():
    return ModelConfig(d_region=6, d_word=5, embed_dim=4, hidden_dim=4, heads=2)


@pytest.fixture
def tiny_params(tiny_config):
    return ModelParams.init(tiny_config, seed=0)
