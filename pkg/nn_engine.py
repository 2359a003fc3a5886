"""Small float64 MLP engine: init, forward, loss, backprop, head per-sample grads, AdamW."""
from dataclasses import dataclass, replace
from typing import List, Tuple
import logging

import numpy as np
from scipy.special import expit, logsumexp, softmax

from models import ModelSpec

# Get logger for this module
logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Raised when arrays do not fit the model layout"""
    pass


@dataclass(frozen=True)
class LayerSlot:
    """Where one linear layer lives inside the flat parameter vector"""
    index: int
    weight_shape: Tuple[int, int]  # (fan_out, fan_in)
    bias_length: int
    offset: int

    @property
    def weight_stop(self) -> int:
        return self.offset + self.weight_shape[0] * self.weight_shape[1]

    @property
    def stop(self) -> int:
        return self.weight_stop + self.bias_length


def param_layout(spec: ModelSpec) -> Tuple[LayerSlot, ...]:
    """Contiguous layout: weights (row-major, fan_out x fan_in) then bias, layer by layer"""
    slots = []
    offset = 0
    for index, (fan_in, fan_out) in enumerate(zip(spec.layer_sizes[:-1], spec.layer_sizes[1:])):
        slot = LayerSlot(index=index, weight_shape=(fan_out, fan_in), bias_length=fan_out, offset=offset)
        slots.append(slot)
        offset = slot.stop
    return tuple(slots)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat float64 parameter vector plus its layer layout"""
    values: np.ndarray
    layout: Tuple[LayerSlot, ...]

    def __post_init__(self):
        expected = self.layout[-1].stop if self.layout else 0
        if self.values.ndim != 1 or self.values.shape[0] != expected:
            raise ShapeError(f"parameter vector has shape {self.values.shape}, layout needs ({expected},)")

    @classmethod
    def from_values(cls, spec: ModelSpec, values) -> "ParamVector":
        return cls(np.asarray(values, dtype=np.float64), param_layout(spec))

    def weight(self, index: int) -> np.ndarray:
        slot = self.layout[index]
        return self.values[slot.offset:slot.weight_stop].reshape(slot.weight_shape)

    def bias(self, index: int) -> np.ndarray:
        slot = self.layout[index]
        return self.values[slot.weight_stop:slot.stop]

    @property
    def head(self) -> LayerSlot:
        return self.layout[-1]

    def head_block(self) -> np.ndarray:
        return self.values[self.head.offset:self.head.stop]

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


@dataclass(frozen=True, eq=False)
class Batch:
    """n samples: inputs (n x d) and labels (n,)"""
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ShapeError(f"inputs must be a non-empty n x d matrix, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"labels shape {self.labels.shape} does not match {self.inputs.shape[0]} inputs")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True, eq=False)
class ForwardPass:
    """Logits plus the cached activations backprop needs"""
    logits: np.ndarray
    activations: List[np.ndarray]  # activations[i] is the input of layer i
    pre_activations: List[np.ndarray]

    @property
    def penultimate(self) -> np.ndarray:
        return self.activations[-1]


@dataclass(frozen=True, eq=False)
class AdamState:
    """Adam moments and hyperparameters; weight decay is decoupled"""
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, n_params: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), t=0, **hyper)


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases"""
    rng = np.random.default_rng(seed)
    layout = param_layout(spec)
    values = np.zeros(layout[-1].stop)
    for slot in layout:
        fan_out, fan_in = slot.weight_shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        values[slot.offset:slot.weight_stop] = rng.uniform(-limit, limit, size=fan_out * fan_in)
    return ParamVector(values, layout)


def _check_params(spec: ModelSpec, params: ParamVector) -> None:
    if params.values.shape[0] != spec.param_count:
        raise ShapeError(f"model has {spec.param_count} parameters, got {params.values.shape[0]}")


def forward(spec: ModelSpec, params: ParamVector, inputs: np.ndarray) -> ForwardPass:
    """Run the MLP; hidden layers use ReLU, the last layer is linear"""
    _check_params(spec, params)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_size:
        raise ShapeError(f"expected inputs of shape (n, {spec.input_size}), got {x.shape}")

    activations = [x]
    pre_activations = []
    last = len(params.layout) - 1
    for slot in params.layout:
        z = activations[-1] @ params.weight(slot.index).T + params.bias(slot.index)
        pre_activations.append(z)
        if slot.index < last:
            activations.append(np.maximum(z, 0.0))
    return ForwardPass(logits=pre_activations[-1], activations=activations, pre_activations=pre_activations)


def _check_labels(labels: np.ndarray, head: str, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if head == "sigmoid_bce":
        if not np.all((labels == 0) | (labels == 1)):
            raise ShapeError("sigmoid_bce labels must be 0 or 1")
        return labels.astype(np.float64)
    if not np.all((labels >= 0) & (labels < n_classes) & (labels == np.round(labels))):
        raise ShapeError(f"softmax_ce labels must be class indices in [0, {n_classes})")
    return labels.astype(np.int64)


def head_residual(logits: np.ndarray, labels: np.ndarray, head: str) -> np.ndarray:
    """d loss_i / d logits_i, i.e. p - y (n x k)"""
    labels = _check_labels(labels, head, logits.shape[1])
    if head == "sigmoid_bce":
        return expit(logits) - labels[:, None]
    residual = softmax(logits, axis=1)
    residual[np.arange(logits.shape[0]), labels] -= 1.0
    return residual


def compute_loss(logits: np.ndarray, labels: np.ndarray, head: str) -> float:
    """Mean BCE (softplus form) or mean softmax cross-entropy"""
    labels = _check_labels(labels, head, logits.shape[1])
    if head == "sigmoid_bce":
        # y=1 -> softplus(-z), y=0 -> softplus(z)
        signed = (1.0 - 2.0 * labels) * logits[:, 0]
        return float(np.mean(np.logaddexp(0.0, signed)))
    picked = logits[np.arange(logits.shape[0]), labels]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def backward_full(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Exact gradient of the batch-mean loss w.r.t. every parameter"""
    fp = forward(spec, params, batch.inputs)
    delta = head_residual(fp.logits, batch.labels, spec.head) / batch.size
    grad = np.empty_like(params.values)
    for slot in reversed(params.layout):
        a_prev = fp.activations[slot.index]
        grad[slot.offset:slot.weight_stop] = (delta.T @ a_prev).ravel()
        grad[slot.weight_stop:slot.stop] = delta.sum(axis=0)
        if slot.index > 0:
            delta = (delta @ params.weight(slot.index)) * (fp.pre_activations[slot.index - 1] > 0)
    return grad


def head_sample_grads(residual: np.ndarray, hidden: np.ndarray) -> np.ndarray:
    """Per-sample head gradients r_i ⊗ [h_i; 1] laid out like the head block (n x P_head)"""
    n, k = residual.shape
    weights = (residual[:, :, None] * hidden[:, None, :]).reshape(n, k * hidden.shape[1])
    return np.concatenate([weights, residual], axis=1)


def per_sample_head_grads(spec: ModelSpec, params: ParamVector, batch: Batch) -> np.ndarray:
    """Closed-form per-sample gradients of the final linear layer, one row per sample"""
    fp = forward(spec, params, batch.inputs)
    residual = head_residual(fp.logits, batch.labels, spec.head)
    return head_sample_grads(residual, fp.penultimate)


def adam_step(state: AdamState, params: ParamVector, grad: np.ndarray) -> Tuple[ParamVector, AdamState]:
    """One bias-corrected Adam step after decoupled weight decay"""
    if grad.shape != params.values.shape or state.m.shape != params.values.shape:
        raise ShapeError(f"gradient {grad.shape} / moments {state.m.shape} do not match parameters {params.values.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)

    decayed = params.values * (1.0 - state.lr * state.weight_decay)
    values = decayed - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params.with_values(values), replace(state, m=m, v=v, t=t)


def sgd_step(params: ParamVector, grad: np.ndarray, lr: float, weight_decay: float = 0.0) -> ParamVector:
    """Plain gradient descent with the same decoupled decay"""
    if grad.shape != params.values.shape:
        raise ShapeError(f"gradient {grad.shape} does not match parameters {params.values.shape}")
    return params.with_values(params.values * (1.0 - lr * weight_decay) - lr * grad)
