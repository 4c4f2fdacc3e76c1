"""End-to-end overfit runs on the planted synthetic set (8 images x 2 captions)."""

import numpy as np
import pytest

from dataio import SyntheticSpec, gen_synthetic, load_dataset
from metrics import similarity_matrix
from model import AblationFlags
from training import TrainConfig, fit

pytestmark = pytest.mark.slow

OVERFIT_SPEC = SyntheticSpec(
    num_images=8, captions_per_image=2, m=6, n=5, d_region=32, d_word=24, concepts=3, noise=0.05, seed=7
)


def overfit_config(root, out, **overrides):
    values = dict(
        dataset=str(root),
        output_dir=str(out),
        lr=1e-3,
        epochs=200,
        batch_size=16,
        decay_period=10_000,
        seed=7,
        embed_dim=32,
        hidden_dim=32,
        heads=2,
        target_rsum=600.0,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def overfit_data(tmp_path_factory):
    root = gen_synthetic(OVERFIT_SPEC, tmp_path_factory.mktemp("overfit"))
    return root, load_dataset(root)


@pytest.fixture(scope="module")
def overfit_run(overfit_data, tmp_path_factory):
    root, dataset = overfit_data
    params, history = fit(dataset, overfit_config(root, tmp_path_factory.mktemp("run")))
    return params, history


def test_overfit_reaches_perfect_recall(overfit_run):
    _, history = overfit_run
    final = history[-1]
    assert len(history) <= 200
    assert final["i2t_r1"] == 100.0 and final["t2i_r1"] == 100.0
    assert final["rsum"] == 600.0 and final["rsum_label"] == "desk-rSum"


@pytest.mark.parametrize(
    "flags", [AblationFlags(no_csf=True), AblationFlags(no_pti=True), AblationFlags(no_tgr=True)], ids=lambda f: f.label
)
def test_ablations_change_the_trained_scores(overfit_data, overfit_run, flags):
    _, dataset = overfit_data
    params, _ = overfit_run
    full = similarity_matrix(dataset, params).scores
    assert np.max(np.abs(similarity_matrix(dataset, params, flags).scores - full)) > 1e-6


@pytest.mark.parametrize("ablation", ["ablate_csf", "ablate_pti", "ablate_tgr"])
def test_ablated_retrain_still_converges(overfit_data, tmp_path, ablation):
    root, dataset = overfit_data
    _, history = fit(dataset, overfit_config(root, tmp_path / ablation, **{ablation: True}))
    assert history[-1]["i2t_r1"] == 100.0 and history[-1]["t2i_r1"] == 100.0
