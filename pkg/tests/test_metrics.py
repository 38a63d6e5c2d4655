import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dad4ts.errors import ContractError
from dad4ts.metrics import ResultCell, dtw, improvement_stats, rmse


def brute_force_dtw(a, b):
    """Minimum cumulative |a_i - b_j| over all monotone warping paths."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    n, m = len(a), len(b)
    best = [np.inf]

    def walk(i, j, acc):
        acc += abs(a[i] - b[j])
        if acc >= best[0]:
            return
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return best[0]


class TestRmse:
    def test_known_value(self):
        assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(np.sqrt(12.5), abs=1e-12)

    def test_identity(self):
        y = np.linspace(-2, 3, 17)
        assert rmse(y, y) == 0.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(3)
        y, y_hat = rng.standard_normal(50), rng.standard_normal(50)
        two_pass = np.sqrt(sum((a - b) ** 2 for a, b in zip(y, y_hat)) / 50)
        assert rmse(y, y_hat) == pytest.approx(two_pass, abs=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            rmse([1.0], [1.0, 2.0])

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=20))
    def test_symmetry(self, values):
        other = values[::-1]
        assert rmse(values, other) == pytest.approx(rmse(other, values))


class TestDtw:
    def test_identical_sequences(self):
        y = np.array([1.0, 2.0, -1.0, 0.5])
        assert dtw(y, y) == 0.0

    def test_hand_evaluated(self):
        # D(1,1)=|0-1|=1; D(2,1)=|0-1|+1=2
        assert dtw([0.0, 0.0], [1.0]) == 2.0

    def test_against_exhaustive_paths(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n, m = rng.integers(1, 6), rng.integers(1, 6)
            a = rng.standard_normal(n)
            b = rng.standard_normal(m)
            assert dtw(a, b) == pytest.approx(brute_force_dtw(a, b), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            dtw([], [1.0])

    @settings(max_examples=50)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    )
    def test_symmetry_and_nonnegative(self, a, b):
        d = dtw(a, b)
        assert d >= 0
        assert d == pytest.approx(dtw(b, a))


class TestImprovementStats:
    def test_single_cell_delta(self):
        stats = improvement_stats([1.32], [1.30])
        assert stats["delta_pct"][0] == pytest.approx(-1.515, abs=0.005)

    def test_reference_row_average(self):
        baseline = [1.32, 1.38, 1.30, 0.153, 0.144, 0.192, 0.184, 0.201]
        method = [1.30, 1.42, 1.41, 0.161, 0.148, 0.207, 0.182, 0.209]
        stats = improvement_stats(baseline, method)
        assert stats["imp_mean"] == pytest.approx(3.57, abs=0.05)

    def test_no_change(self):
        grid = [0.5, 1.5, 2.5]
        stats = improvement_stats(grid, grid)
        assert stats["imp_rate"] == 0.0
        assert stats["imp_mean"] == 0.0

    def test_strict_improvement_counting(self):
        stats = improvement_stats([1.0, 1.0, 1.0], [0.9, 1.0, 1.1])
        assert stats["imp_rate"] == pytest.approx(100.0 / 3.0)

    def test_order_invariance(self):
        base = np.array([1.0, 2.0, 4.0])
        meth = np.array([0.5, 2.5, 3.0])
        a = improvement_stats(base, meth)
        perm = [2, 0, 1]
        b = improvement_stats(base[perm], meth[perm])
        assert a["imp_rate"] == b["imp_rate"]
        assert a["imp_mean"] == pytest.approx(b["imp_mean"])

    def test_zero_baseline_rejected(self):
        with pytest.raises(ContractError):
            improvement_stats([0.0, 1.0], [1.0, 1.0])


def test_result_cell_rejects_negative_metric():
    with pytest.raises(ContractError):
        ResultCell("d", "f", 3, "baseline", rmse=-1.0, dtw=0.0)


def test_exhaustive_oracle_agrees_on_known_case():
    # sanity for the oracle itself on a hand-checkable pair
    assert brute_force_dtw([0.0, 0.0], [1.0]) == 2.0
    assert brute_force_dtw(list(itertools.repeat(2.0, 3)), [2.0]) == 0.0
