"""Loss/accuracy/AUROC/AUPRC evaluation and the fairness statistics."""
from typing import Dict, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.special import xlogy
from scipy.stats import rankdata

from models import ModelSpec
from nn_engine import ParamVector, compute_loss, forward

# Get logger for this module
logger = logging.getLogger(__name__)


def _binary_inputs(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return scores, labels.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(random positive outranks random negative), ties count 0.5"""
    scores, positive = _binary_inputs(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(scores)  # average ranks for ties
    u_statistic = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-wise area under precision-recall: sum (R_k - R_{k-1}) * P_k over descending thresholds"""
    scores, positive = _binary_inputs(scores, labels)
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    true_pos = np.cumsum(positive[order])
    # last index of each block of tied scores is one threshold
    threshold_ends = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.shape[0] - 1]
    tp = true_pos[threshold_ends].astype(np.float64)
    precision = tp / (threshold_ends + 1)
    recall = tp / n_pos
    recall_steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(recall_steps * precision))


def accuracy(logits: np.ndarray, labels: np.ndarray, head: str) -> float:
    if head == "sigmoid_bce":
        predicted = (logits[:, 0] >= 0).astype(np.int64)
    else:
        predicted = np.argmax(logits, axis=1)
    return float(np.mean(predicted == np.asarray(labels)))


def fairness_stats(per_silo_accuracy: Sequence[float]) -> Tuple[float, float]:
    """(population variance of accuracies, KL(normalized accuracies || uniform))"""
    acc = np.asarray(per_silo_accuracy, dtype=np.float64)
    if acc.shape[0] < 2:
        raise ValueError("fairness statistics need at least 2 silos")
    if (acc < 0).any() or acc.sum() <= 0:
        raise ValueError(f"accuracies must be non-negative and not all zero, got {acc.tolist()}")
    if np.all(acc == acc[0]):
        return 0.0, 0.0
    p = acc / acc.sum()
    kl = float(np.sum(xlogy(p, p * acc.shape[0])))
    return float(np.var(acc)), max(kl, 0.0)


def accuracy_entropy(per_silo_accuracy: Sequence[float]) -> float:
    """Shannon entropy of the normalized accuracy vector (log K minus the KL form)"""
    acc = np.asarray(per_silo_accuracy, dtype=np.float64)
    p = acc / acc.sum()
    return float(-np.sum(xlogy(p, p)))


def seed_summary(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample (n-1) standard deviation; input order never matters"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if ordered.shape[0] < 2:
        raise ValueError("seed summary needs at least 2 values")
    return float(ordered.mean()), float(ordered.std(ddof=1))


def format_summary(mean: float, std: float, digits: int = 3) -> str:
    """mean±std the way result tables print it"""
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f}±{std:.{digits}f}"


def _binary_scores(spec: ModelSpec, logits: np.ndarray, labels: np.ndarray) -> Tuple[Optional[float], Optional[float]]:
    if spec.head != "sigmoid_bce":
        return None, None
    positives = int(np.sum(labels))
    if positives == 0 or positives == labels.shape[0]:
        return None, None
    return auroc(logits[:, 0], labels), auprc(logits[:, 0], labels)


def evaluate(spec: ModelSpec, params: ParamVector, inputs: np.ndarray, labels: np.ndarray,
             ) -> Tuple[float, float, Optional[float], Optional[float]]:
    """(loss, accuracy, auroc, auprc) of the model on one dataset"""
    logits = forward(spec, params, inputs).logits
    loss = compute_loss(logits, labels, spec.head)
    roc, pr = _binary_scores(spec, logits, labels)
    return loss, accuracy(logits, labels, spec.head), roc, pr


def group_accuracy(spec: ModelSpec, params: ParamVector, inputs: np.ndarray, labels: np.ndarray,
                   groups: np.ndarray) -> Dict[int, float]:
    """Accuracy per group tag"""
    logits = forward(spec, params, inputs).logits
    return {
        int(group): accuracy(logits[groups == group], labels[groups == group], spec.head)
        for group in np.unique(groups)
    }

