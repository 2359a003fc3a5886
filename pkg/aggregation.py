"""Cross-environment gradient aggregation and the Fishr variance penalty."""
from dataclasses import dataclass
from typing import Optional, Sequence, Union
import logging

import numpy as np
from scipy.special import expit, softmax

from models import ModelSpec
from nn_engine import Batch, ParamVector, forward, head_residual, head_sample_grads

# Get logger for this module
logger = logging.getLogger(__name__)


class AggregationError(ValueError):
    """Raised on empty, ragged or non-finite aggregation inputs"""
    pass


@dataclass(frozen=True, eq=False)
class GradientSet:
    """One gradient vector per environment, stacked as rows (|E| x n_params)"""
    grads: np.ndarray
    weights: Optional[np.ndarray] = None  # reserved

    def __post_init__(self):
        if self.grads.ndim != 2 or self.grads.shape[0] == 0:
            raise AggregationError("gradient set must hold at least one vector")
        if np.isnan(self.grads).any():
            raise AggregationError("gradient set contains NaN")
        if not np.isfinite(self.grads).all():
            raise AggregationError("gradient set contains non-finite entries")

    @classmethod
    def of(cls, grads: Union["GradientSet", np.ndarray, Sequence[np.ndarray]]) -> "GradientSet":
        if isinstance(grads, GradientSet):
            return grads
        if isinstance(grads, np.ndarray):
            matrix = np.asarray(grads, dtype=np.float64)
            if matrix.ndim == 1:
                matrix = matrix[:, None]
            return cls(matrix)
        vectors = [np.atleast_1d(np.asarray(g, dtype=np.float64)) for g in grads]
        if not vectors:
            raise AggregationError("gradient set must hold at least one vector")
        if len({v.shape for v in vectors}) != 1:
            raise AggregationError(f"gradient vectors have mixed shapes {sorted({v.shape for v in vectors})}")
        return cls(np.stack(vectors))

    @property
    def n_envs(self) -> int:
        return self.grads.shape[0]


GradientsLike = Union[GradientSet, np.ndarray, Sequence[np.ndarray]]


@dataclass(frozen=True, eq=False)
class VarianceDiag:
    """Diagonal of one client's head-gradient covariance"""
    values: np.ndarray
    sample_count: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise AggregationError(f"sample_count must be >= 1, got {self.sample_count}")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise AggregationError("variance diagonal must be finite and non-negative")

    @classmethod
    def zeros(cls, length: int) -> "VarianceDiag":
        return cls(np.zeros(length), 1)


def arith_mean(gs: GradientsLike) -> np.ndarray:
    """Coordinatewise arithmetic mean"""
    grads = GradientSet.of(gs).grads
    return grads.sum(axis=0) / grads.shape[0]


def _log_abs(grads: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.abs(grads))


def _partition_geo(log_abs: np.ndarray, members: np.ndarray) -> np.ndarray:
    """(|S|/|E|) * exp(mean of log|g| over S) per coordinate; 0 where S is empty"""
    count = members.sum(axis=0)
    log_sum = np.where(members, log_abs, 0.0).sum(axis=0)
    safe_count = np.maximum(count, 1)
    term = np.exp(log_sum / safe_count) * (count / members.shape[0])
    return np.where(count > 0, term, 0.0)


def weighted_geo_mean(gs: GradientsLike) -> np.ndarray:
    """Sign-partitioned weighted geometric mean; zeros join the non-negative side"""
    grads = GradientSet.of(gs).grads
    log_abs = _log_abs(grads)
    non_negative = grads >= 0
    return _partition_geo(log_abs, non_negative) - _partition_geo(log_abs, ~non_negative)


def abs_geo_mean(gs: GradientsLike) -> np.ndarray:
    """Geometric mean of absolute values; signs are discarded"""
    grads = GradientSet.of(gs).grads
    return np.exp(_log_abs(grads).sum(axis=0) / grads.shape[0])


def grad_variance_diag(per_sample: Union[np.ndarray, Sequence[np.ndarray]]) -> VarianceDiag:
    """Population variance (divide by n) of per-sample gradients, per coordinate"""
    samples = np.asarray(per_sample, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise AggregationError("need at least one per-sample gradient vector")
    centered = samples - samples.mean(axis=0)
    variance = (centered * centered).mean(axis=0)
    return VarianceDiag(variance, samples.shape[0])


def mean_variance(vs: Sequence[VarianceDiag]) -> np.ndarray:
    """Coordinatewise mean of variance diagonals"""
    if not vs:
        raise AggregationError("need at least one variance diagonal")
    lengths = {v.values.shape for v in vs}
    if len(lengths) != 1:
        raise AggregationError(f"variance diagonals have mixed lengths {sorted(lengths)}")
    # Offsets from the first client keep identical diagonals exact
    base = vs[0].values
    return base + arith_mean([v.values - base for v in vs])


def fishr_loss(vs: Sequence[VarianceDiag]) -> float:
    """Mean squared distance of each client's variance from the cross-client mean"""
    v_bar = mean_variance(vs)
    return float(sum(np.sum((v.values - v_bar) ** 2) for v in vs) / len(vs))


def _head_matrix(flat: np.ndarray, k: int, m: int) -> np.ndarray:
    """Head block (W row-major, then b) as a k x (m+1) matrix [W | b]"""
    return np.concatenate([flat[:k * m].reshape(k, m), flat[k * m:][:, None]], axis=1)


def _head_flat(matrix: np.ndarray) -> np.ndarray:
    return np.concatenate([matrix[:, :-1].ravel(), matrix[:, -1]])


def fishr_penalty(spec: ModelSpec, params: ParamVector, batch: Batch, v_bar_prev: VarianceDiag) -> float:
    """||v_e(w) - v_bar_prev||^2 over the head gradients of this batch"""
    if v_bar_prev.values.shape[0] != spec.head_param_count:
        raise AggregationError(f"v_bar_prev has {v_bar_prev.values.shape[0]} entries, head has {spec.head_param_count}")
    fp = forward(spec, params, batch.inputs)
    residual = head_residual(fp.logits, batch.labels, spec.head)
    variance = grad_variance_diag(head_sample_grads(residual, fp.penultimate)).values
    return float(np.sum((variance - v_bar_prev.values) ** 2))


def fishr_penalty_grad(spec: ModelSpec, params: ParamVector, batch: Batch, v_bar_prev: VarianceDiag) -> np.ndarray:
    """Analytic gradient of fishr_penalty w.r.t. the head block.

    Penultimate activations h_i are constants. With G_i = r_i [h_i; 1]^T and
    D = v - v_bar_prev, the chain rule through the variance gives
    dP/dTheta = (4/n) sum_i (J_i^T a_i) [h_i; 1]^T where
    a_i[c] = sum_j D[c,j] (G_i[c,j] - mean_i G[c,j]) [h_i; 1]_j and J_i = dr_i/dz_i.
    """
    if v_bar_prev.values.shape[0] != spec.head_param_count:
        raise AggregationError(f"v_bar_prev has {v_bar_prev.values.shape[0]} entries, head has {spec.head_param_count}")
    fp = forward(spec, params, batch.inputs)
    residual = head_residual(fp.logits, batch.labels, spec.head)
    n, k = residual.shape
    hidden = fp.penultimate
    m = hidden.shape[1]
    augmented = np.concatenate([hidden, np.ones((n, 1))], axis=1)

    per_sample = residual[:, :, None] * augmented[:, None, :]
    centered = per_sample - per_sample.mean(axis=0)
    variance = (centered * centered).mean(axis=0)
    gap = variance - _head_matrix(v_bar_prev.values, k, m)

    a = (centered * gap[None, :, :] * augmented[:, None, :]).sum(axis=2)
    if spec.head == "sigmoid_bce":
        p = expit(fp.logits)
        b = a * p * (1.0 - p)
    else:
        p = softmax(fp.logits, axis=1)
        b = a * p - p * np.sum(a * p, axis=1, keepdims=True)
    grad = (4.0 / n) * (b.T @ augmented)
    return _head_flat(grad)
