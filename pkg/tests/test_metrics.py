import math

import numpy as np
import pytest

from metrics import (
    accuracy, accuracy_entropy, auprc, auroc, evaluate, fairness_stats, format_summary, group_accuracy,
    seed_summary,
)
from nn_engine import init_params


def concordance_auroc(scores, labels) -> float:
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def stepwise_auprc(scores, labels) -> float:
    total, previous_recall = 0.0, 0.0
    for threshold in sorted(set(scores.tolist()), reverse=True):
        predicted = scores >= threshold
        tp = np.sum(labels[predicted] == 1)
        recall = tp / np.sum(labels == 1)
        total += (recall - previous_recall) * tp / np.sum(predicted)
        previous_recall = recall
    return total


class TestRankingMetrics:
    def test_auroc_matches_concordance(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = rng.integers(2, 51)
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
            assert auroc(scores, labels) == concordance_auroc(scores, labels)

    def test_auprc_matches_stepwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = rng.integers(1, 51)
            labels = rng.integers(0, 2, size=n)
            labels[0] = 1
            scores = rng.integers(0, 8, size=n).astype(float)
            assert auprc(scores, labels) == pytest.approx(stepwise_auprc(scores, labels), rel=1e-12)

    def test_negated_scores_mirror_auroc(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = rng.integers(2, 51)
            labels = rng.integers(0, 2, size=n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 6, size=n).astype(float)
            assert auroc(-scores, labels) == pytest.approx(1.0 - auroc(scores, labels), abs=1e-12)

    def test_hand_cases(self):
        assert auroc([0.1, 0.9], [0, 1]) == 1.0
        assert auroc([0.5, 0.5], [0, 1]) == 0.5
        assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3)
        assert auprc([0.5] * 4, [1, 0, 1, 0]) == 0.5
        assert auprc([3.0, 2.0, 1.0], [1, 1, 0]) == 1.0

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc([0.1, 0.2], [1, 1])
        with pytest.raises(ValueError):
            auprc([0.1, 0.2], [0, 0])


class TestFairness:
    def test_uniform_accuracies(self):
        assert fairness_stats([0.8, 0.8, 0.8]) == (0.0, 0.0)

    def test_two_silo_hand_case(self):
        variance, kl = fairness_stats([1.0, 0.5])
        assert variance == pytest.approx(0.0625, abs=1e-9)
        assert kl == pytest.approx(2 / 3 * math.log(4 / 3) + 1 / 3 * math.log(2 / 3), abs=1e-9)
        assert kl == pytest.approx(0.05663, abs=1e-5)

    def test_zero_accuracy_silo(self):
        variance, kl = fairness_stats([0.0, 1.0])
        assert variance == 0.25
        assert kl == pytest.approx(math.log(2))

    def test_needs_two_silos(self):
        with pytest.raises(ValueError):
            fairness_stats([0.9])

    def test_entropy_of_uniform(self):
        assert accuracy_entropy([0.7] * 4) == pytest.approx(math.log(4))


class TestSeedSummary:
    def test_sample_std(self):
        assert seed_summary([3.0, 1.0, 2.0]) == (2.0, 1.0)

    def test_order_independent(self):
        values = [0.5421, 0.5377, 0.5502, 0.5468, 0.5399]
        assert seed_summary(values) == seed_summary(values[::-1])

    def test_needs_two_seeds(self):
        with pytest.raises(ValueError):
            seed_summary([1.0])

    def test_format(self):
        assert format_summary(0.5424, 0.0061) == "0.542±0.006"
        assert format_summary(float("nan"), 0.0) == "n/a"


class TestEvaluate:
    def test_binary_model(self, small_spec, small_params, small_batch):
        loss, acc, roc, pr = evaluate(small_spec, small_params, small_batch.inputs, small_batch.labels)
        assert loss > 0 and 0 <= acc <= 1
        assert roc is not None and pr is not None

    def test_softmax_has_no_ranking_metrics(self, softmax_spec):
        params = init_params(softmax_spec, 0)
        _, _, roc, pr = evaluate(softmax_spec, params, np.ones((3, 3)), np.array([0, 1, 2]))
        assert roc is None and pr is None

    def test_accuracy_threshold_at_zero_logit(self):
        assert accuracy(np.array([[0.0], [-0.1], [2.0]]), np.array([1, 0, 0]), "sigmoid_bce") == pytest.approx(2 / 3)

    def test_group_accuracy(self, small_spec, small_params, small_batch):
        groups = np.array([0, 1] * 6)
        by_group = group_accuracy(small_spec, small_params, small_batch.inputs, small_batch.labels, groups)
        assert set(by_group) == {0, 1}
        _, overall, _, _ = evaluate(small_spec, small_params, small_batch.inputs, small_batch.labels)
        assert (by_group[0] + by_group[1]) / 2 == pytest.approx(overall)
