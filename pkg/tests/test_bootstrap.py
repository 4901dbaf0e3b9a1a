import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sparsemeans.bootstrap import (
    BootstrapNull,
    bootstrap_null,
    bootstrap_pvalue,
    calibrated_outcome,
    quantile,
)
from sparsemeans.core import multi_threshold_test
from sparsemeans.data import TwoSampleData
from sparsemeans.precision import fit_banded_cholesky
from sparsemeans.transform import transform_with_estimate, transformed_test

from oracles import ar1_cov


def make_null(copies):
    return BootstrapNull(np.sort(np.asarray(copies, float)), "MultiThresh", 0, 0)


@pytest.fixture(scope="module")
def ar1_data():
    rng = np.random.default_rng(0)
    factor = np.linalg.cholesky(ar1_cov(40, 0.6))
    return TwoSampleData(rng.standard_normal((15, 40)) @ factor.T, rng.standard_normal((20, 40)) @ factor.T)


class TestQuantile:
    def test_type7_by_hand(self):
        assert quantile(make_null([1, 2, 3, 4]), 0.5) == 2.5
        assert quantile(make_null([4, 1, 3, 2]), 0.25) == pytest.approx(1.75)

    def test_extremes(self):
        bn = make_null([3.0, -1.0, 7.0])
        assert quantile(bn, 0.0) == -1.0
        assert quantile(bn, 1.0) == 7.0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0, 1))
    def test_matches_numpy(self, values, q):
        assert quantile(make_null(values), q) == pytest.approx(np.quantile(values, q), rel=1e-12, abs=1e-9)

    def test_empty_grid_copies(self):
        bn = make_null([-math.inf, -math.inf, 0.5, 1.0])
        assert quantile(bn, 0.2) == -math.inf
        assert quantile(bn, 0.9) == pytest.approx(np.quantile([0.5, 1.0], 0.7))

    def test_empty(self):
        with pytest.raises(ValueError):
            quantile(make_null([]), 0.5)

    def test_bad_q(self):
        with pytest.raises(ValueError):
            quantile(make_null([1.0]), 1.5)


class TestPvalue:
    def test_counts(self):
        bn = make_null(range(1, 100))  # 99 copies
        assert bootstrap_pvalue(100, bn) == pytest.approx(1 / 100)
        assert bootstrap_pvalue(99, bn) == pytest.approx(2 / 100)
        assert bootstrap_pvalue(-5, bn) == 1.0

    def test_calibrated_outcome(self):
        bn = make_null(np.arange(100.0))
        out = calibrated_outcome("MultiThresh", 96.0, bn, 0.05, {})
        assert out.critical_value == pytest.approx(np.quantile(np.arange(100.0), 0.95))
        assert out.reject and out.pvalue_source == "bootstrap"
        assert calibrated_outcome("MultiThresh", -1e9, bn, 1.0, {}).reject


class TestBootstrapNull:
    def test_sorted_and_length(self, ar1_data):
        bn = bootstrap_null(ar1_data, "MultiThresh", b=120, tau=1, seed=3)
        assert bn.b == 120 and np.all(np.diff(bn.copies) >= 0)
        assert bn.method == "MultiThresh" and bn.tau == 1

    @pytest.mark.parametrize("method", ["MultiThresh", "TransformedMulti"])
    def test_deterministic(self, ar1_data, method):
        a = bootstrap_null(ar1_data, method, b=100, tau=1, seed=7)
        b = bootstrap_null(ar1_data, method, b=100, tau=1, seed=7)
        assert a.copies.tobytes() == b.copies.tobytes()
        c = bootstrap_null(ar1_data, method, b=100, tau=1, seed=8)
        assert not np.array_equal(a.copies, c.copies)

    def test_prefix_stable(self, ar1_data):
        # replicate i draws from its own stream, so a larger B extends a smaller one
        small = bootstrap_null(ar1_data, "MultiThresh", b=100, tau=1, seed=2)
        large = bootstrap_null(ar1_data, "MultiThresh", b=150, tau=1, seed=2)
        assert np.all(np.isin(small.copies, large.copies))

    def test_tau_selected_when_missing(self, ar1_data):
        bn = bootstrap_null(ar1_data, "MultiThresh", b=100, seed=0)
        assert 0 <= bn.tau <= 8

    def test_validation(self, ar1_data):
        with pytest.raises(ValueError):
            bootstrap_null(ar1_data, "MultiThresh", b=50, tau=1)
        with pytest.raises(ValueError):
            bootstrap_null(ar1_data, "CQ", b=100, tau=1)

    def test_median_via_quantile(self, ar1_data):
        bn = bootstrap_null(ar1_data, "TransformedMulti", b=101, tau=1, seed=1)
        assert quantile(bn, 0.5) == bn.copies[50]

    def test_tests_use_bootstrap(self, ar1_data):
        bn = bootstrap_null(ar1_data, "MultiThresh", b=100, tau=1, seed=1)
        out = multi_threshold_test(ar1_data, 0.05, bootstrap=bn)
        assert out.pvalue_source == "bootstrap"
        assert out.critical_value == quantile(bn, 0.95)
        td = transform_with_estimate(ar1_data, fit_banded_cholesky(ar1_data, 1))
        bn2 = bootstrap_null(ar1_data, "TransformedMulti", b=100, tau=1, seed=1)
        out2 = transformed_test(td, 0.05, bootstrap=bn2)
        assert out2.method == "TransformedMulti" and out2.extra["bootstrap_b"] == 100

    def test_reselect_flag(self, ar1_data):
        bn = bootstrap_null(ar1_data, "TransformedMulti", b=100, tau=1, seed=1, reselect_tau=True,
                            band_candidates=[0, 1, 2])
        assert bn.settings["reselect_tau"] and bn.b == 100


@pytest.mark.slow
class TestCalibration:
    def test_null_pvalues_roughly_uniform(self):
        # under Gaussian H0 the bootstrap p-value should not pile up near 0
        factor = np.linalg.cholesky(ar1_cov(30, 0.5))
        pvals = []
        for rep in range(40):
            rng = np.random.default_rng(1000 + rep)
            data = TwoSampleData(rng.standard_normal((20, 30)) @ factor.T, rng.standard_normal((25, 30)) @ factor.T)
            bn = bootstrap_null(data, "MultiThresh", b=100, tau=1, seed=rep)
            pvals.append(multi_threshold_test(data, 0.05, bootstrap=bn).pvalue)
        assert np.mean(np.array(pvals) <= 0.2) < 0.45
