import csv
import math

import numpy as np
import pytest

from collis.metrics import (
    ConfusionMatrix,
    certainty_of_incorrect,
    iou_from_matrix,
    retention_and_accuracy,
    uniform_cross_entropy,
    write_iou_csv,
)


def iou_by_sets(truth, pred, k):
    """Per-class IoU from explicit index sets."""
    out = []
    for c in range(k):
        t = {i for i, v in enumerate(truth) if v == c}
        p = {i for i, v in enumerate(pred) if v == c}
        u = t | p
        out.append(len(t & p) / len(u) if u else float("nan"))
    return out


class TestConfusion:
    def test_perfect_is_diagonal(self):
        y = np.array([0, 1, 2, 2, 1])
        m = ConfusionMatrix(3).accumulate(y, y)
        assert np.count_nonzero(m.counts - np.diag(np.diag(m.counts))) == 0
        iou, miou = iou_from_matrix(m)
        np.testing.assert_array_equal(iou, 1.0)
        assert miou == 1.0

    def test_single_off_diagonal(self):
        m = ConfusionMatrix(3).accumulate([1], [2])
        assert m.counts[1, 2] == 1 and m.total == 1

    def test_additivity(self, rng):
        t, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        mask = rng.random(50) < 0.5
        a = ConfusionMatrix(4).accumulate(t, p, mask)
        b = ConfusionMatrix(4).accumulate(t, p, ~mask)
        whole = ConfusionMatrix(4).accumulate(t, p)
        np.testing.assert_array_equal(a.merge(b).counts, whole.counts)

    def test_constant_prediction(self):
        truth = np.r_[np.zeros(50, int), np.ones(50, int)]
        iou, miou = iou_from_matrix(ConfusionMatrix(2).accumulate(truth, np.zeros(100, int)))
        np.testing.assert_allclose(iou, [0.5, 0.0])
        assert miou == 0.25

    def test_against_set_oracle(self, rng):
        for _ in range(20):
            t, p = rng.integers(0, 3, 30), rng.integers(0, 3, 30)
            iou, miou = iou_from_matrix(ConfusionMatrix(3).accumulate(t, p))
            ref = iou_by_sets(t, p, 3)
            np.testing.assert_allclose(iou, ref)
            present = [ref[c] for c in range(3) if c in set(t)]
            assert miou == pytest.approx(np.mean(present), abs=1e-12)
            assert 0.0 <= miou <= 1.0

    def test_absent_class_excluded(self):
        iou, miou = iou_from_matrix(ConfusionMatrix(3).accumulate([0, 0, 1], [0, 0, 1]))
        assert math.isnan(iou[2]) and miou == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate([0, 1], [0])


class TestRetention:
    def test_nothing_retained(self):
        assert retention_and_accuracy(np.zeros(4, bool), np.zeros(4), np.zeros(4)) == (0.0, None)

    def test_all_correct(self):
        y = np.array([1, 2, 3])
        assert retention_and_accuracy(np.ones(3, bool), y, y) == (1.0, 1.0)

    def test_hand_case(self):
        kept = np.array([1, 1, 1, 0, 0], bool)
        pseudo = np.array([2, 1, 0, 0, 0])
        truth = np.array([2, 1, 3, 0, 0])
        rate, acc = retention_and_accuracy(kept, pseudo, truth)
        assert rate == 0.6 and acc == pytest.approx(2 / 3)

    def test_eligibility(self):
        rate, _ = retention_and_accuracy([True, True, False], [0, 0, 0], [0, 0, 0], eligible=[True, False, True])
        assert rate == 0.5


class TestCertainty:
    def test_uniform_minimum(self):
        p = np.full((3, 4), 0.25)
        assert certainty_of_incorrect(p, [0, 0, 0], [1, 1, 1]) == pytest.approx(math.log(4), abs=1e-12)

    def test_worked_value(self):
        p = np.array([[0.7, 0.1, 0.1, 0.1]])
        value = certainty_of_incorrect(p, [0], [2])
        assert value == pytest.approx(-0.25 * (math.log(0.7) + 3 * math.log(0.1)), abs=1e-12)
        assert value == pytest.approx(1.8161, abs=1e-4)

    def test_no_mistakes(self):
        assert certainty_of_incorrect(np.full((2, 2), 0.5), [0, 1], [0, 1]) is None

    def test_only_wrong_points_count(self):
        p = np.array([[0.97, 0.01, 0.01, 0.01], [0.25, 0.25, 0.25, 0.25]])
        assert certainty_of_incorrect(p, [0, 0], [0, 1]) == pytest.approx(math.log(4))

    def test_gibbs_bound(self, rng):
        p = rng.dirichlet(np.ones(5), 200)
        assert np.all(uniform_cross_entropy(p) >= math.log(5) - 1e-12)


def test_iou_csv(tmp_path):
    rows = [{"epoch": 0, "student": "range", "a": 0.5, "b": 0.25, "miou": 0.375}]
    write_iou_csv(rows, ["a", "b"], tmp_path / "iou.csv")
    with open(tmp_path / "iou.csv") as fh:
        back = list(csv.DictReader(fh))
    assert back[0]["student"] == "range" and float(back[0]["miou"]) == 0.375
