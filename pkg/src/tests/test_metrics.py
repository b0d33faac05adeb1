"""Tests for ranking and segmentation metrics."""

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from core.metrics import accuracy, average_precision, mask_metrics, mean_average_precision, metrics_from_counts


def _naive_ap(scores, labels) -> float:
    """Precision at every positive rank, enumerated one position at a time."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for position, index in enumerate(ranked, start=1):
        if labels[index]:
            hits += 1
            total += hits / position
    return total / hits


class TestAveragePrecision:
    """Test single-class AP."""

    def test_hand_example(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx(5 / 6)

    def test_perfect_ranking(self):
        rng = np.random.default_rng(0)
        for n in (1, 5, 40):
            labels = rng.integers(0, 2, size=n)
            labels[0] = 1
            assert average_precision(labels.astype(float), labels) == 1.0

    def test_single_positive_ranked_last(self):
        assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25)

    def test_ties_keep_original_order(self):
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)

    def test_no_positive_raises(self):
        with pytest.raises(ValueError, match='without positives'):
            average_precision([0.1, 0.2], [0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match='differ in length'):
            average_precision([0.1, 0.2], [1])

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            n = int(rng.integers(1, 30))
            scores = np.round(rng.random(n), 1)
            labels = rng.integers(0, 2, size=n)
            if not labels.any():
                labels[int(rng.integers(n))] = 1
            assert average_precision(scores, labels) == pytest.approx(_naive_ap(list(scores), list(labels)))

    def test_agrees_with_sklearn_without_ties(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            scores = rng.random(60)
            labels = rng.integers(0, 2, size=60)
            labels[0] = 1
            assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores))

    def test_invariant_under_increasing_transform(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=100)
        labels = rng.integers(0, 2, size=100)
        labels[0] = 1
        base = average_precision(scores, labels)
        assert average_precision(np.exp(scores), labels) == pytest.approx(base)
        assert average_precision(3.0 * scores + 7.0, labels) == pytest.approx(base)

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            labels = rng.integers(0, 2, size=20)
            labels[5] = 1
            assert 0.0 < average_precision(rng.random(20), labels) <= 1.0


class TestMeanAveragePrecision:
    """Test the macro mean over classes."""

    def test_scores_equal_labels(self):
        labels = np.eye(4, dtype=int)
        assert mean_average_precision(labels.astype(float), labels) == 1.0

    def test_class_without_positive_is_skipped(self):
        labels = np.array([[1, 0, 0], [0, 1, 0], [1, 1, 0]])
        scores = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.5], [0.1, 0.3, 0.5]])
        expected = np.mean([average_precision(scores[:, 0], labels[:, 0]), average_precision(scores[:, 1], labels[:, 1])])
        assert mean_average_precision(scores, labels) == pytest.approx(expected)

    def test_random_instance_matches_oracle(self):
        rng = np.random.default_rng(5)
        scores = rng.random((20, 5))
        labels = rng.integers(0, 2, size=(20, 5))
        labels[0] = 1
        expected = np.mean([_naive_ap(list(scores[:, c]), list(labels[:, c])) for c in range(5)])
        assert mean_average_precision(scores, labels) == pytest.approx(expected)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match='matching'):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_no_class_with_positive(self):
        with pytest.raises(ValueError, match='no class'):
            mean_average_precision(np.zeros((3, 2)), np.zeros((3, 2), dtype=int))


def test_accuracy_ties_go_to_lowest_index():
    logits = np.array([[1.0, 1.0], [0.0, 2.0], [3.0, 1.0]])
    assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2 / 3)


def test_accuracy_empty():
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 3)), np.zeros(0))


class TestMaskMetrics:
    """Test change-class precision, recall and F1."""

    def test_perfect_prediction(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 2:5] = 1
        m = mask_metrics(gt, gt)
        assert (m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[0, 0] = 1
        m = mask_metrics(np.zeros_like(gt), gt)
        assert m.recall == 0.0 and m.f1 == 0.0 and m.fn == 1

    def test_counts_example(self):
        m = metrics_from_counts(3, 2, 1)
        assert m.precision == pytest.approx(0.6)
        assert m.recall == pytest.approx(0.75)
        assert m.f1 == pytest.approx(2 * 0.45 / 1.35)

    def test_counts_from_masks(self):
        pred = np.array([1, 1, 1, 1, 1, 0, 0])
        gt = np.array([1, 1, 1, 0, 0, 1, 0])
        m = mask_metrics(pred, gt)
        assert (m.tp, m.fp, m.fn) == (3, 2, 1)

    def test_all_zero_counts(self):
        m = metrics_from_counts(0, 0, 0)
        assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match='shape'):
            mask_metrics(np.zeros((2, 2)), np.zeros((2, 3)))
