"""Tests on precision-transformed data and the max-norm comparison tests."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from .core import (
    _check_alpha,
    component_stats,
    gumbel_critical,
    gumbel_pvalue,
    max_standardized,
    null_moments,
    threshold_level,
    single_level_test,
)
from .data import DataError, TestOutcome, TwoSampleData
from .precision import PrecisionEstimate, band_matrix, omega_apply, omega_diagonal

DIAG_FLOOR = 1e-12
DEFAULT_ETA_STAR = 0.05


@dataclass(frozen=True)
class TransformedData:
    """Transformed samples (optional) and what the statistics need from them.

    ``mean_diff`` is ``Zbar1 - Zbar2`` and ``omega_diag`` the per-coordinate
    standardizers. ``z1``/``z2`` are kept when the full transform was run.
    """

    mean_diff: np.ndarray
    omega_diag: np.ndarray
    n: float
    tau: Optional[int] = None
    z1: Optional[np.ndarray] = None
    z2: Optional[np.ndarray] = None

    @property
    def p(self) -> int:
        return self.mean_diff.size

    def values(self) -> np.ndarray:
        """``n (Zbar1_k - Zbar2_k)^2 / omega_kk``."""
        low = np.flatnonzero(self.omega_diag < DIAG_FLOOR)
        if low.size:
            raise DataError(f"omega diagonal entry {int(low[0])} below {DIAG_FLOOR:g}")
        return self.n * self.mean_diff ** 2 / self.omega_diag


def transform(
    data: TwoSampleData,
    omega: np.ndarray,
    tau: Optional[int] = None,
    omega_diag: Optional[np.ndarray] = None,
) -> TransformedData:
    """Multiply every observation by ``omega`` (banded to ``tau`` first when given).

    ``omega_diag`` overrides the standardizers, e.g. with the exact
    ``Var{sqrt(n)(Zbar1 - Zbar2)}`` when the covariances are known.
    """
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (data.p, data.p):
        raise ValueError(f"omega must be {data.p}x{data.p}, got {omega.shape}")
    if tau is not None:
        omega = band_matrix(omega, tau)
    z1 = data.x1 @ omega.T
    z2 = data.x2 @ omega.T
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(z2))):
        raise DataError("transformed data contain non-finite values")
    diag = np.diag(omega).copy() if omega_diag is None else np.asarray(omega_diag, dtype=float)
    return TransformedData(
        mean_diff=z1.mean(axis=0) - z2.mean(axis=0),
        omega_diag=diag,
        n=data.n,
        tau=tau,
        z1=z1,
        z2=z2,
    )


def transform_with_estimate(data: TwoSampleData, est: PrecisionEstimate) -> TransformedData:
    """Mean-difference-only transform by a banded Cholesky estimate (no dense product)."""
    coef = est.coef if est.coef is not None else _coef_from_dense(est)
    diff = data.x1.mean(axis=0) - data.x2.mean(axis=0)
    return TransformedData(
        mean_diff=omega_apply(coef, est.d_hat, est.kappa, diff),
        omega_diag=omega_diagonal(coef, est.d_hat, est.kappa),
        n=data.n,
        tau=est.tau,
    )


def _coef_from_dense(est: PrecisionEstimate) -> np.ndarray:
    p, tau = est.d_hat.size, est.tau
    coef = np.zeros((p, tau))
    for i in range(tau):
        lag = tau - i
        coef[lag:, i] = np.diagonal(est.a_hat, offset=-lag)
    return coef


def transformed_threshold_statistic(td: TransformedData, s: float) -> float:
    """``sum_k (v_k - 1) 1{v_k > 2 s log p}`` on standardized transformed differences."""
    v = td.values()
    return float(np.sum((v - 1.0)[v > float(threshold_level(s, td.p))]))


def _check_window(theta: float, eta_star: float):
    if not (0.0 < theta < 1.0):
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not (0.0 < eta_star < theta):
        raise ValueError(f"eta_star must lie in (0, theta), got {eta_star} with theta={theta}")


def default_theta(n: float, p: int) -> float:
    """``log n / log p`` clamped to ``[0.1, 0.9]``."""
    return min(0.9, max(0.1, math.log(n) / math.log(p)))


def transformed_multi_threshold(
    td: TransformedData, theta: Optional[float] = None, eta_star: float = DEFAULT_ETA_STAR
) -> Tuple[float, float]:
    """Maximum standardized statistic over levels in ``(1 - theta, 1 - eta_star)``."""
    theta = default_theta(td.n, td.p) if theta is None else theta
    _check_window(theta, eta_star)
    v = td.values()
    return max_standardized(v, v - 1.0, td.p, 1.0 - theta, 1.0 - eta_star)


def transformed_single_test(td: TransformedData, s: float, alpha: float = 0.05) -> TestOutcome:
    out = single_level_test(transformed_threshold_statistic(td, s), null_moments(s, td.p), alpha)
    out.method = "TransformedSingle"
    return out


def transformed_test(
    td: TransformedData,
    alpha: float = 0.05,
    theta: Optional[float] = None,
    eta_star: float = DEFAULT_ETA_STAR,
    bootstrap=None,
) -> TestOutcome:
    """Multi-level test on transformed data.

    The Gumbel critical value uses ``b(log p, theta - eta_star)``.
    """
    _check_alpha(alpha)
    theta = default_theta(td.n, td.p) if theta is None else theta
    m, s_star = transformed_multi_threshold(td, theta, eta_star)
    extra = {"argmax_s": s_star, "theta": theta, "eta_star": eta_star, "tau": td.tau}
    if bootstrap is not None:
        from .bootstrap import calibrated_outcome

        return calibrated_outcome("TransformedMulti", m, bootstrap, alpha, extra)
    crit = gumbel_critical(alpha, td.p, theta - eta_star)
    return TestOutcome(
        "TransformedMulti", m, m, crit, alpha, bool(m >= crit),
        gumbel_pvalue(m, td.p, theta - eta_star), "gumbel", extra,
    )


def clx_statistics(
    data: TwoSampleData,
    precision: Optional[Union[PrecisionEstimate, TransformedData]] = None,
    known_unit_variance: bool = False,
) -> Tuple[float, Optional[float]]:
    """Max-norm statistics without and with the precision transform."""
    cs = component_stats(data, known_unit_variance)
    g_identity = float(np.max(cs.m_std))
    if precision is None:
        return g_identity, None
    td = precision if isinstance(precision, TransformedData) else transform_with_estimate(data, precision)
    return g_identity, float(np.max(td.values()))


def _check_clx_p(p: int):
    if p <= 2:
        raise ValueError(f"max-norm calibration needs p >= 3, got p={p}")


def clx_critical(alpha: float, p: int) -> float:
    """Upper-alpha quantile of ``exp(-pi^{-1/2} exp(-x/2))``.

    Compared against the centered statistic ``G - 2 log p + log log p``.
    """
    _check_clx_p(p)
    _check_alpha(alpha)
    if alpha >= 1.0:
        return -math.inf
    return -2.0 * math.log(-math.sqrt(math.pi) * math.log1p(-alpha))


def clx_cdf(x: float) -> float:
    return math.exp(-math.exp(-x / 2.0) / math.sqrt(math.pi))


def clx_center(g: float, p: int) -> float:
    return g - 2.0 * math.log(p) + math.log(math.log(p))


def clx_test(g: float, p: int, alpha: float = 0.05, method: str = "CLX_I") -> TestOutcome:
    _check_clx_p(p)
    centered = clx_center(g, p)
    crit = clx_critical(alpha, p)
    pvalue = -math.expm1(-math.exp(-centered / 2.0) / math.sqrt(math.pi))
    return TestOutcome(method, g, centered, crit, alpha, bool(centered >= crit), pvalue, "clx")


def exact_transformed_variance(
    omega: np.ndarray, sigma1: np.ndarray, sigma2: np.ndarray, kappa: float
) -> np.ndarray:
    """Diagonal of ``Var{sqrt(n)(Zbar1 - Zbar2)} = Omega {(1 - kappa) Sigma1 + kappa Sigma2} Omega``."""
    mixed = (1.0 - kappa) * np.asarray(sigma1, dtype=float) + kappa * np.asarray(sigma2, dtype=float)
    omega = np.asarray(omega, dtype=float)
    return np.einsum("ij,jk,ki->i", omega, mixed, omega)
