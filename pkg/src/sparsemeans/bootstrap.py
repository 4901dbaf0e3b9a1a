"""Parametric bootstrap for the null distribution of the multi-level statistics.

Bootstrap samples are Gaussian with the banded-Cholesky covariance estimate
of each sample, whatever the distribution of the observed data. Replicate
``b`` draws from its own stream keyed by ``(seed, b)``, so the copies do not
depend on the order in which replicates are computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import DEFAULT_ETA, _check_alpha, component_stats, multi_threshold_statistic
from .data import DataError, TestOutcome, TwoSampleData
from .precision import (
    cholesky_covariance_factor,
    cholesky_regression,
    omega_apply,
    omega_diagonal,
    pooled_gram,
    sample_gram,
    select_band_width,
)
from .transform import DEFAULT_ETA_STAR, TransformedData, default_theta, transformed_multi_threshold

BOOTSTRAP_METHODS = ("MultiThresh", "TransformedMulti")
DEFAULT_B = 300
MIN_B = 100


@dataclass(frozen=True)
class BootstrapNull:
    """Sorted bootstrap copies of a max-statistic."""

    copies: np.ndarray
    method: str
    seed: int
    tau: int
    settings: dict = field(default_factory=dict)

    @property
    def b(self) -> int:
        return self.copies.size


def _covariance_factor(sample: np.ndarray, tau: int) -> np.ndarray:
    tau = min(tau, sample.shape[1] - 1)
    coef, d = cholesky_regression(sample_gram(sample), tau)
    if not np.all(np.isfinite(d)) or np.any(d <= 0):
        raise DataError("estimated covariance is not positive definite")
    factor = cholesky_covariance_factor(coef, d)
    if not np.all(np.isfinite(factor)):
        raise DataError("estimated covariance factor has non-finite entries")
    return factor


def _replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def bootstrap_null(
    data: TwoSampleData,
    method: str = "MultiThresh",
    b: int = DEFAULT_B,
    tau: Optional[int] = None,
    seed: int = 0,
    *,
    eta: float = DEFAULT_ETA,
    variant: str = "L2",
    known_unit_variance: bool = False,
    theta: Optional[float] = None,
    eta_star: float = DEFAULT_ETA_STAR,
    reselect_tau: bool = False,
    band_candidates: Optional[Sequence[int]] = None,
) -> BootstrapNull:
    """Bootstrap copies of the multi-level statistic under ``N(0, Sigma_hat_i)``.

    Parameters
    ----------
    data : TwoSampleData
        Observed samples; only their covariance estimates are used.
    method : {"MultiThresh", "TransformedMulti"}
        Which statistic to recompute on each bootstrap sample.
    b : int
        Number of replicates, at least 100.
    tau : int, optional
        Band width for the covariance (and, for the transformed statistic,
        precision) estimates. Selected from ``data`` when omitted.
    seed : int
        Base seed; replicate ``i`` uses the stream ``(seed, i)``.
    known_unit_variance : bool
        For ``MultiThresh``: standardize by the bootstrap population
        variances (the diagonals of ``Sigma_hat_i``) instead of the
        sample variances, mirroring a known-variance observed statistic.
    reselect_tau : bool
        For ``TransformedMulti``: re-select the band width on every
        replicate instead of reusing ``tau``.
    """
    if method not in BOOTSTRAP_METHODS:
        raise ValueError(f"bootstrap supports {BOOTSTRAP_METHODS}, got {method!r}")
    if b < MIN_B:
        raise ValueError(f"bootstrap needs b >= {MIN_B}, got {b}")
    if tau is None:
        tau = select_band_width(data, band_candidates, seed=seed)
    l1 = _covariance_factor(data.x1, tau)
    l2 = _covariance_factor(data.x2, tau)
    n1, n2, p = data.n1, data.n2, data.p
    if method == "TransformedMulti" and theta is None:
        theta = default_theta(data.n, p)

    known_scale = None
    if known_unit_variance:
        var1 = np.sum(l1 ** 2, axis=1)
        var2 = np.sum(l2 ** 2, axis=1)
        known_scale = data.n * (var1 / n1 + var2 / n2)

    copies = np.empty(b)
    for i in range(b):
        rng = _replicate_rng(seed, i)
        x1 = rng.standard_normal((n1, p)) @ l1.T
        x2 = rng.standard_normal((n2, p)) @ l2.T
        boot = TwoSampleData(x1, x2)
        if method == "MultiThresh":
            cs = component_stats(boot)
            if known_scale is not None:
                cs = type(cs)(cs.t_nk, known_scale, cs.m_nk, cs.n, cs.p)
            copies[i] = multi_threshold_statistic(cs, eta, variant)[0]
        else:
            t = select_band_width(boot, band_candidates, seed=seed) if reselect_tau else tau
            t = min(t, p - 1)
            coef, d = cholesky_regression(pooled_gram(boot), t)
            diff = x1.mean(axis=0) - x2.mean(axis=0)
            td = TransformedData(
                mean_diff=omega_apply(coef, d, boot.kappa, diff),
                omega_diag=omega_diagonal(coef, d, boot.kappa),
                n=boot.n,
                tau=t,
            )
            copies[i] = transformed_multi_threshold(td, theta, eta_star)[0]
    settings = {"eta": eta, "variant": variant, "theta": theta, "eta_star": eta_star,
                "known_unit_variance": known_unit_variance, "reselect_tau": reselect_tau}
    return BootstrapNull(np.sort(copies), method, int(seed), int(tau), settings)


def _type7(sorted_x: np.ndarray, q: float) -> float:
    # linear interpolation between order statistics; guards keep -inf copies finite-safe
    h = (sorted_x.size - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, sorted_x.size - 1)
    frac = h - lo
    a, c = sorted_x[lo], sorted_x[hi]
    if frac == 0.0 or a == c:
        return float(a)
    if np.isneginf(a):
        return -math.inf
    return float(a + frac * (c - a))


def quantile(bn: BootstrapNull, q: float) -> float:
    """Empirical quantile of the copies (linear interpolation, type 7)."""
    if bn.copies.size == 0:
        raise ValueError("bootstrap null has no copies")
    if not (0.0 <= q <= 1.0):
        raise ValueError(f"q must lie in [0, 1], got {q}")
    return _type7(bn.copies, q)


def bootstrap_pvalue(m: float, bn: BootstrapNull) -> float:
    """``(1 + #{copies >= m}) / (B + 1)``."""
    count = bn.b - int(np.searchsorted(bn.copies, m, side="left"))
    return (1.0 + count) / (bn.b + 1.0)


def calibrated_outcome(method: str, m: float, bn: BootstrapNull, alpha: float, extra: dict) -> TestOutcome:
    """Outcome of a multi-level test with a bootstrap critical value."""
    _check_alpha(alpha)
    crit = -math.inf if alpha >= 1.0 else quantile(bn, 1.0 - alpha)
    extra = dict(extra, bootstrap_b=bn.b, bootstrap_seed=bn.seed, bootstrap_tau=bn.tau)
    return TestOutcome(method, m, m, crit, alpha, bool(m >= crit), bootstrap_pvalue(m, bn),
                       "bootstrap", extra)
