"""Untransformed two-sample statistics.

Covers the per-coordinate U-statistics, the L2-type (CQ) and BS sums,
the Oracle restriction, single- and multi-level thresholding, their
closed-form null moments, the Gumbel calibration of the multi-level
maximum and the detection-boundary curves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .data import DataError, TestOutcome, TwoSampleData

VAR_FLOOR = 1e-12
GRID_TOL = 1e-12
DEFAULT_ETA = 0.05
DEFAULT_CQ_BAND = 30

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ComponentStats:
    """Per-coordinate pieces of the two-sample statistics.

    ``scale[k]`` is the variance of ``sqrt(n) * (xbar1_k - xbar2_k)``, i.e.
    ``n * (s1_kk / n1 + s2_kk / n2)``; it equals 1 when unit variances are
    declared known, so ``n * t_nk / scale[k]`` is the standardized
    component in both cases.
    """

    t_nk: np.ndarray
    scale: np.ndarray
    m_nk: np.ndarray
    n: float
    p: int

    @property
    def t_std(self) -> np.ndarray:
        """``n * t_nk / scale``."""
        return self.n * self.t_nk / self.scale

    @property
    def m_std(self) -> np.ndarray:
        """``n * m_nk / scale``."""
        return self.n * self.m_nk / self.scale


@dataclass(frozen=True)
class NullMoments:
    mu0: float
    sigma0: float
    s: float
    p: int


@dataclass(frozen=True)
class DetectionPoint:
    beta: float
    r: float = 0.0
    theta: Optional[float] = None


def component_stats(data: TwoSampleData, known_unit_variance: bool = False) -> ComponentStats:
    """Per-coordinate U-statistics, squared mean differences and scales.

    The within/between pair sums are evaluated through the identity
    ``t_nk = (xbar1 - xbar2)^2 - v1/n1 - v2/n2`` (``v`` the unbiased sample
    variances), which avoids cancellation when the means are large.
    """
    n1, n2 = data.n1, data.n2
    mean1 = data.x1.mean(axis=0)
    mean2 = data.x2.mean(axis=0)
    var1 = data.x1.var(axis=0, ddof=1)
    var2 = data.x2.var(axis=0, ddof=1)
    m_nk = (mean1 - mean2) ** 2
    t_nk = m_nk - var1 / n1 - var2 / n2
    if known_unit_variance:
        scale = np.ones(data.p)
    else:
        mixed = var1 / n1 + var2 / n2
        bad = np.flatnonzero(mixed < VAR_FLOOR)
        if bad.size:
            raise DataError(
                f"degenerate coordinate {int(bad[0])}: sample variance below {VAR_FLOOR:g}"
            )
        scale = data.n * mixed
    return ComponentStats(t_nk=t_nk, scale=scale, m_nk=m_nk, n=data.n, p=data.p)


def cq_statistic(cs: ComponentStats) -> float:
    """``n * sum_k t_nk / scale_k``."""
    return float(np.sum(cs.t_std))


def bs_statistic(cs: ComponentStats) -> float:
    """``n * sum_k m_nk / scale_k - p``."""
    return float(np.sum(cs.m_std) - cs.p)


def oracle_statistic(cs: ComponentStats, signal_set: Sequence[int]) -> float:
    idx = _as_index_set(signal_set, cs.p)
    return float(np.sum(cs.t_std[idx]))


def _as_index_set(signal_set, p: int) -> np.ndarray:
    idx = np.unique(np.asarray(list(signal_set), dtype=int))
    if idx.size == 0:
        raise ValueError("signal set is empty; the Oracle statistic is undefined")
    if idx[0] < 0 or idx[-1] >= p:
        raise ValueError(f"signal set indices must lie in [0, {p - 1}]")
    return idx


def _mixed_covariance(data: TwoSampleData, cols: Optional[np.ndarray] = None) -> np.ndarray:
    x1 = data.x1 if cols is None else data.x1[:, cols]
    x2 = data.x2 if cols is None else data.x2[:, cols]
    c1 = np.cov(x1, rowvar=False, ddof=1).reshape(x1.shape[1], x1.shape[1])
    c2 = np.cov(x2, rowvar=False, ddof=1).reshape(x2.shape[1], x2.shape[1])
    return data.n * (c1 / data.n1 + c2 / data.n2)


def _lag_correlations(data: TwoSampleData, lag: int) -> np.ndarray:
    """Correlations between coordinates ``k`` and ``k + lag`` of sqrt(n)(xbar1 - xbar2)."""
    d1 = data.x1 - data.x1.mean(axis=0)
    d2 = data.x2 - data.x2.mean(axis=0)
    cov_lag = (d1[:, :-lag] * d1[:, lag:]).sum(axis=0) / ((data.n1 - 1) * data.n1) + (
        d2[:, :-lag] * d2[:, lag:]
    ).sum(axis=0) / ((data.n2 - 1) * data.n2)
    var = (d1 ** 2).sum(axis=0) / ((data.n1 - 1) * data.n1) + (d2 ** 2).sum(axis=0) / (
        (data.n2 - 1) * data.n2
    )
    var = np.maximum(var, VAR_FLOOR)
    return cov_lag / np.sqrt(var[:-lag] * var[lag:])


def _debiased_square(rho: np.ndarray, dof: int) -> np.ndarray:
    # first-order bias of a squared sample correlation is (1 - rho^2)^2 / dof
    r2 = rho ** 2
    return r2 - (1.0 - r2) ** 2 / dof


def cq_null_variance_estimate(
    data: TwoSampleData, band: Optional[int] = None, debias: bool = True
) -> float:
    """Banded plug-in estimate of ``2p + 2 sum_{i != j} rho_ij^2``.

    Only pairs with ``0 < |i - j| <= band`` contribute. With ``debias`` the
    first-order small-sample bias of each squared correlation is removed.
    The result is floored at 2 so it stays positive.
    """
    p = data.p
    if band is None:
        band = min(p - 1, DEFAULT_CQ_BAND)
    if band < 0 or (band >= p and p > 1) or (p == 1 and band > 0):
        raise ValueError(f"band must satisfy 0 <= band < p (band={band}, p={p})")
    dof = data.n1 + data.n2 - 2
    total = 2.0 * p
    for lag in range(1, band + 1):
        rho = _lag_correlations(data, lag)
        sq = _debiased_square(rho, dof) if debias else rho ** 2
        total += 4.0 * float(np.sum(sq))
    return max(total, 2.0)


def oracle_null_variance_estimate(
    data: TwoSampleData, signal_set: Sequence[int], band: Optional[int] = None, debias: bool = True
) -> float:
    """``2|S| + 2 sum_{i != j in S} rho_ij^2`` restricted to pairs within ``band``."""
    idx = _as_index_set(signal_set, data.p)
    if band is None:
        band = min(data.p - 1, DEFAULT_CQ_BAND)
    total = 2.0 * idx.size
    if idx.size > 1:
        cov = _mixed_covariance(data, idx)
        sd = np.sqrt(np.maximum(np.diag(cov), VAR_FLOOR))
        rho = cov / np.outer(sd, sd)
        near = np.abs(idx[:, None] - idx[None, :]) <= band
        np.fill_diagonal(near, False)
        sq = _debiased_square(rho[near], data.n1 + data.n2 - 2) if debias else rho[near] ** 2
        total += 2.0 * float(np.sum(sq))
    return max(total, 2.0)


def threshold_level(s, p: int):
    """``lambda_n(s) = 2 s log p``."""
    return 2.0 * np.asarray(s, dtype=float) * math.log(p)


def _keys_and_terms(cs: ComponentStats, variant: str) -> Tuple[np.ndarray, np.ndarray]:
    # returns (u, g): coordinate k is retained at level s iff u_k > 2 s log p,
    # and then contributes g_k
    if variant == "L2":
        v = cs.m_std
        return v, v - 1.0
    if variant == "L1":
        w = cs.t_std
        return w + 1.0, w
    raise ValueError(f"variant must be 'L1' or 'L2', got {variant!r}")


def threshold_statistic(cs: ComponentStats, s: float, variant: str = "L2") -> float:
    """Single-level thresholding statistic ``L_n(s)``.

    ``L1`` sums ``n t_hat`` over ``n t_hat + 1 > lambda``; ``L2`` sums
    ``n m_hat - 1`` over ``n m_hat > lambda``.
    """
    lam = float(threshold_level(s, cs.p))
    u, g = _keys_and_terms(cs, variant)
    return float(np.sum(g[u > lam]))


def null_moments(s, p: int):
    """Leading-order null mean and standard deviation of ``L_n(s)``.

    Vectorized over ``s``; a scalar ``s`` gives a :class:`NullMoments`.
    """
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr <= 0) or np.any(s_arr > 1):
        raise ValueError("threshold exponent s must lie in (0, 1]")
    if p < 2:
        raise ValueError("null moments need p >= 2")
    lam = 2.0 * s_arr * math.log(p)
    tail = p ** (1.0 - s_arr)
    mu0 = 2.0 / _SQRT_2PI * np.sqrt(lam) * tail
    # the upper-tail term keeps sigma0 of order sqrt(p) as s -> 0
    var0 = 2.0 / _SQRT_2PI * (lam ** 1.5 + lam ** 0.5) * tail + 4.0 * p * stats.norm.sf(np.sqrt(lam))
    sigma0 = np.sqrt(var0)
    if s_arr.ndim == 0:
        return NullMoments(mu0=float(mu0), sigma0=float(sigma0), s=float(s_arr), p=p)
    return mu0, sigma0


def _upper_normal_quantile(alpha: float) -> float:
    if alpha >= 1.0:
        return -math.inf
    return float(stats.norm.isf(alpha))


def _check_alpha(alpha: float):
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")


def single_level_test(L: float, nm: NullMoments, alpha: float = 0.05) -> TestOutcome:
    """Reject when ``(L - mu0) / sigma0 >= z_alpha``."""
    _check_alpha(alpha)
    z = (L - nm.mu0) / nm.sigma0
    crit = _upper_normal_quantile(alpha)
    return TestOutcome(
        method="SingleThresh",
        statistic=float(L),
        standardized=float(z),
        critical_value=crit,
        alpha=alpha,
        reject=bool(z >= crit),
        pvalue=float(stats.norm.sf(z)),
        pvalue_source="normal",
        extra={"s": nm.s, "mu0": nm.mu0, "sigma0": nm.sigma0},
    )


def _grid_keys(keys: np.ndarray, p: int, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    if p < 2:
        raise ValueError("candidate grid needs p >= 2")
    keys = np.asarray(keys, dtype=float)
    denom = 2.0 * math.log(p)
    s = keys / denom
    inside = np.sort(keys[(s > lo) & (s < hi)])
    if inside.size == 0:
        return inside, inside
    levels = inside / denom
    keep = np.concatenate(([True], np.diff(levels) > GRID_TOL))
    return levels[keep], inside[keep]


def level_grid(keys: np.ndarray, p: int, lo: float, hi: float) -> np.ndarray:
    """Levels ``keys / (2 log p)`` strictly inside ``(lo, hi)``, ascending, deduplicated."""
    return _grid_keys(keys, p, lo, hi)[0]


def candidate_grid(cs: ComponentStats, eta: float = DEFAULT_ETA, variant: str = "L2") -> np.ndarray:
    """Levels at which the thresholding statistic changes, inside ``(0, 1 - eta)``."""
    u, _ = _keys_and_terms(cs, variant)
    return level_grid(u, cs.p, 0.0, 1.0 - eta)


def max_standardized(
    keys: np.ndarray, terms: np.ndarray, p: int, lo: float, hi: float
) -> Tuple[float, float]:
    """Maximize ``(L(s) - mu0(s)) / sigma0(s)`` over the data-driven grid.

    ``L(s) = sum of terms[k] over keys[k] > 2 s log p``. Returns
    ``(-inf, nan)`` when no level falls inside ``(lo, hi)``. Ties go to the
    smallest level.
    """
    grid, grid_keys = _grid_keys(keys, p, lo, hi)
    if grid.size == 0:
        return -math.inf, math.nan
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    # suffix[i]: sum of terms at ascending-sorted positions >= i
    suffix = np.concatenate((np.cumsum(terms[order][::-1])[::-1], [0.0]))
    # at the level defined by key u only keys strictly above u are retained;
    # comparing keys directly avoids re-deriving lambda from the rounded level
    L = suffix[np.searchsorted(sorted_keys, grid_keys, side="right")]
    mu0, sigma0 = null_moments(grid, p)
    z = (L - mu0) / sigma0
    i = int(np.argmax(z))
    return float(z[i]), float(grid[i])


def multi_threshold_statistic(
    cs: ComponentStats, eta: float = DEFAULT_ETA, variant: str = "L2"
) -> Tuple[float, float]:
    """Multi-level statistic ``max_s (L_n(s) - mu0(s)) / sigma0(s)`` and its argmax."""
    u, g = _keys_and_terms(cs, variant)
    return max_standardized(u, g, cs.p, 0.0, 1.0 - eta)


def gumbel_a(y: float) -> float:
    return math.sqrt(2.0 * math.log(y))


def gumbel_b(y: float, eta: float) -> float:
    return (
        2.0 * math.log(y)
        + 0.5 * math.log(math.log(y))
        - 0.5 * math.log(4.0 * math.pi / (1.0 - eta) ** 2)
    )


def gumbel_quantile(alpha: float) -> float:
    """Upper-alpha quantile of ``exp(-exp(-x))``."""
    if alpha >= 1.0:
        return -math.inf
    return -math.log(-math.log1p(-alpha))


def _check_gumbel_p(p: int):
    if p <= 2:
        raise ValueError(
            f"Gumbel calibration needs p >= 3 (log log p > 0), got p={p}; use bootstrap calibration"
        )


def gumbel_critical(alpha: float, p: int, eta: float = DEFAULT_ETA) -> float:
    """``{q_alpha + b(log p, eta)} / a(log p)``."""
    _check_gumbel_p(p)
    _check_alpha(alpha)
    y = math.log(p)
    return (gumbel_quantile(alpha) + gumbel_b(y, eta)) / gumbel_a(y)


def gumbel_pvalue(m: float, p: int, eta: float = DEFAULT_ETA) -> float:
    _check_gumbel_p(p)
    if m == -math.inf:
        return 1.0
    y = math.log(p)
    x = gumbel_a(y) * m - gumbel_b(y, eta)
    return float(-math.expm1(-math.exp(-x)))


def cq_test(
    data: TwoSampleData,
    alpha: float = 0.05,
    known_unit_variance: bool = False,
    band: Optional[int] = None,
    cs: Optional[ComponentStats] = None,
) -> TestOutcome:
    """Reject when ``T_n / sigma_hat >= z_alpha``."""
    _check_alpha(alpha)
    cs = cs if cs is not None else component_stats(data, known_unit_variance)
    t = cq_statistic(cs)
    sd = math.sqrt(cq_null_variance_estimate(data, band))
    z = t / sd
    crit = _upper_normal_quantile(alpha)
    return TestOutcome("CQ", t, z, crit, alpha, bool(z >= crit), float(stats.norm.sf(z)), "normal",
                       {"sigma0": sd})


def bs_test(data: TwoSampleData, alpha: float = 0.05, known_unit_variance: bool = False,
            band: Optional[int] = None) -> TestOutcome:
    """BS sum standardized with the same null variance estimate as CQ."""
    _check_alpha(alpha)
    cs = component_stats(data, known_unit_variance)
    m = bs_statistic(cs)
    sd = math.sqrt(cq_null_variance_estimate(data, band))
    z = m / sd
    crit = _upper_normal_quantile(alpha)
    return TestOutcome("BS", m, z, crit, alpha, bool(z >= crit), float(stats.norm.sf(z)), "normal",
                       {"sigma0": sd})


def oracle_test(
    data: TwoSampleData,
    signal_set: Sequence[int],
    alpha: float = 0.05,
    known_unit_variance: bool = False,
    band: Optional[int] = None,
    cs: Optional[ComponentStats] = None,
) -> TestOutcome:
    _check_alpha(alpha)
    cs = cs if cs is not None else component_stats(data, known_unit_variance)
    o = oracle_statistic(cs, signal_set)
    sd = math.sqrt(oracle_null_variance_estimate(data, signal_set, band))
    z = o / sd
    crit = _upper_normal_quantile(alpha)
    return TestOutcome("Oracle", o, z, crit, alpha, bool(z >= crit), float(stats.norm.sf(z)),
                       "normal", {"sigma0": sd})


def multi_threshold_test(
    data: TwoSampleData,
    alpha: float = 0.05,
    eta: float = DEFAULT_ETA,
    variant: str = "L2",
    known_unit_variance: bool = False,
    bootstrap=None,
    cs: Optional[ComponentStats] = None,
) -> TestOutcome:
    """Multi-level thresholding test, Gumbel-calibrated unless a bootstrap null is given."""
    _check_alpha(alpha)
    cs = cs if cs is not None else component_stats(data, known_unit_variance)
    m, s_star = multi_threshold_statistic(cs, eta, variant)
    extra = {"argmax_s": s_star, "eta": eta, "variant": variant}
    if bootstrap is not None:
        from .bootstrap import calibrated_outcome

        return calibrated_outcome("MultiThresh", m, bootstrap, alpha, extra)
    crit = gumbel_critical(alpha, cs.p, eta)
    return TestOutcome("MultiThresh", m, m, crit, alpha, bool(m >= crit),
                       gumbel_pvalue(m, cs.p, eta), "gumbel", extra)


def rho_boundary(beta: float) -> float:
    if beta <= 0.75:
        return beta - 0.5
    return (1.0 - math.sqrt(1.0 - beta)) ** 2


def rho_theta_boundary(beta: float, theta: float) -> float:
    if beta <= (3.0 - theta) / 4.0:
        return (math.sqrt(1.0 - theta) - math.sqrt(1.0 - beta - theta / 2.0)) ** 2
    return rho_boundary(beta)


def detection_boundary(pt: DetectionPoint) -> Tuple[float, Optional[float]]:
    """Detection boundary without and (if ``theta`` is set) with an estimated precision matrix.

    Defined for ``1/2 <= beta < 1``.
    """
    if not (0.5 <= pt.beta < 1.0):
        raise ValueError(f"beta must lie in [1/2, 1), got {pt.beta}")
    rho = rho_boundary(pt.beta)
    if pt.theta is None:
        return rho, None
    if not (0.0 < pt.theta < 1.0):
        raise ValueError(f"theta must lie in (0, 1), got {pt.theta}")
    return rho, rho_theta_boundary(pt.beta, pt.theta)


def snr_analysis(
    deltas: np.ndarray,
    corr: np.ndarray,
    n: float,
    which: str = "CQ",
    s: Optional[float] = None,
) -> float:
    """Population signal-to-noise ratio of the CQ, Oracle or thresholding test.

    ``deltas`` are the raw mean differences ``mu1 - mu2`` and ``corr`` the
    correlation matrix of ``sqrt(n)(xbar1 - xbar2)``. For ``"Thresh"`` the
    level ``s`` is required and the leading-order mean/variance expansions
    of ``L_n(s)`` under the alternative are used.
    """
    deltas = np.asarray(deltas, dtype=float)
    corr = np.asarray(corr, dtype=float)
    p = deltas.size
    support = np.flatnonzero(deltas != 0)
    if support.size == 0:
        return 0.0
    d = deltas[support]
    r_ss = corr[np.ix_(support, support)]
    signal_cov = 4.0 * n * float(d @ r_ss @ d)
    numerator = n * float(np.sum(d ** 2))
    if which == "CQ":
        off = corr ** 2
        noise = 2.0 * p + 2.0 * (float(off.sum()) - float(np.trace(off)))
        return numerator / math.sqrt(noise + signal_cov)
    if which == "Oracle":
        off = r_ss ** 2
        noise = 2.0 * support.size + 2.0 * (float(off.sum()) - float(np.trace(off)))
        return numerator / math.sqrt(noise + signal_cov)
    if which == "Thresh":
        if s is None:
            raise ValueError("thresholding SNR needs the level s")
        lam = float(threshold_level(s, p))
        nd2 = n * d ** 2
        strong = nd2 > lam
        eta_minus = math.sqrt(lam) - np.sqrt(nd2)
        tail = stats.norm.sf(eta_minus)
        gain = float(np.sum(nd2[strong]) + np.sum(lam * tail[~strong]))
        nm = null_moments(s, p)
        rs = r_ss[np.ix_(strong, strong)]
        ds = d[strong]
        var1 = (
            nm.sigma0 ** 2
            + 4.0 * n * float(ds @ rs @ ds)
            + 2.0 * float(np.sum(rs ** 2))
            + float(np.sum(lam ** 2 * tail[~strong]))
        )
        return gain / math.sqrt(var1)
    raise ValueError(f"which must be 'CQ', 'Oracle' or 'Thresh', got {which!r}")
