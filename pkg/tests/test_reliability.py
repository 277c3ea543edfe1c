from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collis.reliability import (
    absolute_reliability,
    distillation_weights,
    dominance_counts,
    filter_pseudo_labels,
    relative_reliability,
    reliability_state,
    threshold,
)
from collis.students import StudentOutput


def fake_output(probs):
    probs = np.asarray(probs, dtype=np.float64)
    return StudentOutput(np.log(probs), probs, probs.argmax(1), probs.max(1), None, None, None)


class TestAbsolute:
    def test_endpoints(self):
        assert absolute_reliability(0, 60, 0.5) == (0.0, 0.5)
        assert absolute_reliability(60, 60, 0.5) == (1.0, 1.0)

    def test_midpoint(self):
        beta, lam = absolute_reliability(50, 100, 0.5)
        assert beta == 0.5 and lam == pytest.approx(0.75, abs=1e-12)

    def test_range(self):
        with pytest.raises(ValueError):
            absolute_reliability(5, 0, 0.5)
        with pytest.raises(ValueError):
            absolute_reliability(7, 6, 0.5)


class TestDominance:
    def test_worked_example(self):
        n = dominance_counts([[0.9, 0.6, 0.8], [0.7, 0.7, 0.85]])
        assert n[0, 1] == 2 and n[1, 0] == 3
        g = relative_reliability(n)
        assert g[0][1] == Fraction(2, 3) and g[1][0] == Fraction(3, 2)

    def test_ties_count_for_neither(self):
        n = dominance_counts([[0.5, 0.6], [0.5, 0.6]])
        assert n[0, 1] == 1 and n[1, 0] == 1
        assert relative_reliability(n)[0][1] == 1

    def test_strict_dominance(self):
        n = dominance_counts([[0.9] * 7, [0.3] * 7])
        assert (n[0, 1], n[1, 0]) == (8, 1)

    def test_matches_loop(self, rng):
        c = rng.random((3, 40)).round(1)
        n = dominance_counts(c)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert n[i, j] == 1 + sum(c[i, m] > c[j, m] for m in range(40))

    def test_invariant_under_monotone_transform(self, rng):
        c = rng.random((3, 50))
        np.testing.assert_array_equal(dominance_counts(c), dominance_counts(np.exp(3 * c) - 2))

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            dominance_counts([[0.5, 0.5]])

    def test_unsmoothed_zero_rejected(self):
        n = dominance_counts([[0.9], [0.1]], smoothing=0)
        with pytest.raises(ZeroDivisionError):
            relative_reliability(n)


class TestThreshold:
    def test_values(self):
        assert threshold(0.95, 0.0, 1) == 0.95
        assert threshold(0.95, 0.5, 2) == pytest.approx(0.2375, abs=1e-12)
        assert threshold(0.95, 0.0, 0.5) == 0.95

    def test_monotone_grid(self):
        betas = np.linspace(0, 1, 21)
        gammas = [Fraction(1, 5), Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(4)]
        for g in gammas:
            d = [threshold(0.95, b, g) for b in betas]
            assert all(x >= y for x, y in zip(d, d[1:]))
        for b in betas:
            d = [threshold(0.95, b, g) for g in gammas]
            assert all(x >= y for x, y in zip(d, d[1:]))


class TestFilter:
    def test_worked_example(self):
        out = fake_output([[0.99, 0.005, 0.005], [0.3, 0.4, 0.3], [0.25, 0.5, 0.25]])
        labels, mask = filter_pseudo_labels(out, 0.9, np.ones(3, bool))
        np.testing.assert_array_equal(mask, [True, False, False])
        assert labels[0] == 0

    def test_threshold_above_max_keeps_nothing(self, rng):
        p = rng.dirichlet(np.ones(4), 20)
        _, mask = filter_pseudo_labels(fake_output(p), p.max(), np.ones(20, bool))
        assert not mask.any()

    def test_threshold_below_uniform_keeps_everything_eligible(self, rng):
        p = rng.dirichlet(np.ones(4), 20)
        elig = rng.random(20) < 0.5
        _, mask = filter_pseudo_labels(fake_output(p), 0.24, elig)
        np.testing.assert_array_equal(mask, elig)


class TestWeights:
    def test_two_sources(self):
        n = np.array([[0, 30, 5], [10, 0, 5], [5, 5, 0]])
        w = distillation_weights(n, 2, [0, 1])
        assert w == {0: Fraction(3, 4), 1: Fraction(1, 4)}

    def test_equal_counts(self):
        n = np.full((3, 3), 4)
        w = distillation_weights(n, 0, [1, 2])
        assert w[1] == w[2] == Fraction(1, 2)

    def test_single_and_self(self):
        n = np.full((2, 2), 3)
        assert distillation_weights(n, 0, [1]) == {1: 1}
        with pytest.raises(ValueError):
            distillation_weights(n, 0, [0, 1])

    def test_four_students_row_sums(self):
        n = np.array([[0, 2, 3, 9], [4, 0, 1, 9], [5, 6, 0, 9], [1, 1, 1, 0]])
        w = distillation_weights(n, 3, [0, 1, 2])
        assert w == {0: Fraction(5, 21), 1: Fraction(5, 21), 2: Fraction(11, 21)}


class TestState:
    def test_naive_mode(self, rng):
        st_ = reliability_state(rng.random((3, 30)), 0.4, 0.5, 0.95, naive=True)
        assert all(g == 1 for row in st_.gamma for g in row)
        assert set(st_.delta.values()) == {0.95}
        assert set(st_.omega.values()) == {Fraction(1, 2)}

    def test_forced_delta(self, rng):
        st_ = reliability_state(rng.random((3, 30)), 0.4, 0.5, 0.95, force_delta=1.0)
        assert set(st_.delta.values()) == {1.0}

    def test_snapshot_is_json_ready(self, rng):
        import json

        snap = reliability_state(rng.random((3, 10)), 0.5, 0.75, 0.95).snapshot()
        json.dumps(snap)
        assert set(snap) == {"beta", "lambda_u", "counts", "gamma", "delta", "omega"}

    @settings(max_examples=200, deadline=None)
    @given(
        s=st.integers(2, 4),
        m=st.integers(1, 30),
        beta=st.floats(0, 1),
        seed=st.integers(0, 2**31),
    )
    def test_algebra(self, s, m, beta, seed):
        rng = np.random.default_rng(seed)
        conf = rng.integers(0, 5, (s, m)) / 4
        state = reliability_state(conf, beta, 1.0, 0.95)
        for i in range(s):
            for j in range(s):
                assert state.gamma[i][j] * state.gamma[j][i] == 1
        for t in range(s):
            total = sum(state.omega[(i, t)] for i in range(s) if i != t)
            assert total == 1
        assert all(d <= 0.95 for d in state.delta.values())
