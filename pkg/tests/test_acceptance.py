"""End-to-end checks on full-size runs. Deselect with -m "not slow"."""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from aggregation import weighted_geo_mean
from datasets import load_mnist, make_color_digits, make_synth_spurious
from federation import run_experiment
from metrics import seed_summary
from models import ModelSpec, RoundConfig
from test_aggregation import naive_weighted_geo_mean, random_gradient_set

SEEDS = [0, 1, 2, 3, 4]
FLIP_PROBS = [0.15, 0.30, 0.45, 0.60, 0.75]


def _mean_min_ood_loss(fed_by_seed, spec, **config) -> float:
    losses = []
    for seed, fed in fed_by_seed.items():
        log = run_experiment(fed, RoundConfig(seed=seed, **config), spec)
        losses.append(min(record.ood_loss for record in log.records))
    return seed_summary(losses)[0]


@pytest.mark.slow
def test_geo_mean_oracle_on_ten_thousand_sets():
    rng = np.random.default_rng(2024)
    start = time.time()
    for _ in range(10_000):
        grads = random_gradient_set(rng)
        np.testing.assert_allclose(weighted_geo_mean(grads), naive_weighted_geo_mean(grads), rtol=1e-12, atol=1e-11)
    assert time.time() - start < 10.0


@pytest.mark.slow
def test_synthetic_spurious_benchmark_ordering():
    spec = ModelSpec(layer_sizes=[11, 32, 1])
    fed_by_seed = {seed: make_synth_spurious(1000, 10, FLIP_PROBS, 0.9, seed, n_ood=2000) for seed in SEEDS}
    # small Adam steps: the invariant weights grow at the same rate in every arm
    shared = dict(rounds=200, batch_size=64, lr=1e-4, fishr_lambda=0.1)

    fed_sgd = _mean_min_ood_loss(fed_by_seed, spec, mode="fed_sgd", **shared)
    inter_geo = _mean_min_ood_loss(fed_by_seed, spec, mode="fishr_inter_geo", **shared)
    intra_geo = _mean_min_ood_loss(fed_by_seed, spec, mode="fishr_intra_geo", geo_chunk=8, **shared)
    assert inter_geo < fed_sgd
    assert intra_geo < fed_sgd


def _mnist_paths():
    data_dir = os.getenv("FEDILC_DATA_DIR")
    if not data_dir:
        return None
    for suffix in ("", ".gz"):
        images = Path(data_dir) / f"train-images-idx3-ubyte{suffix}"
        labels = Path(data_dir) / f"train-labels-idx1-ubyte{suffix}"
        if images.is_file() and labels.is_file():
            return images, labels
    return None


@pytest.mark.slow
@pytest.mark.skipif(_mnist_paths() is None, reason="MNIST files not found under FEDILC_DATA_DIR")
def test_color_digits_inter_geo_beats_fed_sgd():
    base = load_mnist(*_mnist_paths())
    spec = ModelSpec(layer_sizes=[392, 390, 390, 1])
    fed_by_seed = {seed: make_color_digits(base, FLIP_PROBS, 0.9, 0.15, seed) for seed in SEEDS}
    shared = dict(rounds=200, batch_size=64, lr=3e-4, weight_decay=0.01)

    fed_sgd = _mean_min_ood_loss(fed_by_seed, spec, mode="fed_sgd", **shared)
    inter_geo = _mean_min_ood_loss(fed_by_seed, spec, mode="fishr_inter_geo", fishr_lambda=15.0, **shared)
    assert inter_geo < fed_sgd
