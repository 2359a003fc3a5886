import numpy as np
import pytest

from datasets import make_synth_spurious
from models import ModelSpec, RoundConfig
from nn_engine import Batch, init_params


def relative_error(a, b, floor: float = 1e-5) -> float:
    """Largest |a - b| / max(|a|, |b|, floor) over all coordinates"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


@pytest.fixture
def small_spec() -> ModelSpec:
    return ModelSpec(layer_sizes=[4, 8, 1])


@pytest.fixture
def softmax_spec() -> ModelSpec:
    return ModelSpec(layer_sizes=[3, 5, 4], head="softmax_ce")


@pytest.fixture
def small_params(small_spec):
    params = init_params(small_spec, seed=3)
    # random biases so no unit sits exactly on a ReLU kink
    rng = np.random.default_rng(11)
    return params.with_values(params.values + 0.1 * rng.normal(size=params.values.shape))


@pytest.fixture
def small_batch() -> Batch:
    rng = np.random.default_rng(5)
    return Batch(rng.normal(size=(12, 4)), rng.permutation(np.array([0, 1] * 6)))


@pytest.fixture
def tiny_federation():
    return make_synth_spurious(n_per_silo=40, d_inv=3, flip_probs=[0.1, 0.5, 0.9], ood_flip=0.9, seed=0, n_ood=60)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(layer_sizes=[4, 6, 1])


@pytest.fixture
def round_config() -> RoundConfig:
    return RoundConfig(mode="fed_sgd", lr=1e-2, rounds=5, batch_size=16, geo_chunk=4, seed=0)
