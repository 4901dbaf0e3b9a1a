"""Banded Cholesky estimation of the precision matrix.

Each coordinate is regressed on its ``tau`` predecessors; the regression
coefficients form a unit lower-triangular ``I - A`` and the residual
variances a diagonal ``D``, giving ``Sigma^{-1} = (I - A)^T D^{-1} (I - A)``.

For the two-sample problem the regressions run over the pseudo-observations
``Y_kl = X_1k - sqrt(n1/n2) X_2l`` (all ``n1 * n2`` pairs), taken about the
pooled grand mean so that a common location shift has no effect. Their
average outer product is
``M_1 + (n1/n2) M_2 - sqrt(n1/n2) (m_1 m_2^T + m_2 m_1^T)`` with ``M_i``
the second-moment matrices and ``m_i`` the means, so the pairs are never
enumerated.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .data import TwoSampleData

RESIDUAL_FLOOR = 1e-10
RIDGE = 1e-8
DEFAULT_SPLITS = 20
MAX_DEFAULT_BAND = 20


@dataclass(frozen=True)
class PrecisionEstimate:
    """Banded Cholesky precision estimate.

    ``omega_hat = (I - a_hat)^T diag(d_hat)^{-1} (I - a_hat) / (1 - kappa)``.
    For a one-sample fit ``kappa`` is 0.
    """

    a_hat: np.ndarray
    d_hat: np.ndarray
    omega_hat: np.ndarray
    tau: int
    kappa: float
    coef: Optional[np.ndarray] = None

    @property
    def omega_diag(self) -> np.ndarray:
        return np.diag(self.omega_hat).copy()


def band_matrix(m: np.ndarray, tau: int) -> np.ndarray:
    """Zero every entry with ``|i - j| > tau``."""
    m = np.asarray(m, dtype=float)
    p = m.shape[0]
    if m.shape != (p, p):
        raise ValueError("band_matrix needs a square matrix")
    if not (0 <= tau <= p - 1):
        raise ValueError(f"tau must lie in [0, {p - 1}], got {tau}")
    i = np.arange(p)
    return np.where(np.abs(i[:, None] - i[None, :]) <= tau, m, 0.0)


def pooled_gram(data: TwoSampleData) -> np.ndarray:
    """Average of ``Y Y^T`` over all pseudo-observation pairs (about the grand mean)."""
    grand = (data.x1.sum(axis=0) + data.x2.sum(axis=0)) / (data.n1 + data.n2)
    d1 = data.x1 - grand
    d2 = data.x2 - grand
    w = math.sqrt(data.n1 / data.n2)
    m1, m2 = d1.mean(axis=0), d2.mean(axis=0)
    cross = np.outer(m1, m2)
    gram = d1.T @ d1 / data.n1 + (d2.T @ d2) / data.n2 * (data.n1 / data.n2) - w * (cross + cross.T)
    return (gram + gram.T) / 2.0


def sample_gram(sample: np.ndarray) -> np.ndarray:
    centered = sample - sample.mean(axis=0)
    return centered.T @ centered / sample.shape[0]


def _windows(p: int, tau: int):
    offsets = np.arange(tau) - tau
    idx = np.arange(p)[:, None] + offsets[None, :]
    valid = idx >= 0
    return np.where(valid, idx, 0), valid


def cholesky_regression(gram: np.ndarray, tau: int):
    """Regress each coordinate on its ``tau`` predecessors given second moments.

    ``gram`` may carry leading batch dimensions ``(..., p, p)``. Returns
    ``(coef, d)`` where ``coef[..., j, i]`` multiplies coordinate
    ``j - tau + i`` (zero where that index is negative) and ``d`` holds the
    residual mean squares. Singular windows get a ridge of
    ``1e-8 * trace``; residual variances are floored at ``1e-10``.
    """
    gram = np.asarray(gram, dtype=float)
    p = gram.shape[-1]
    diag = np.diagonal(gram, axis1=-2, axis2=-1).copy()
    if tau < 0:
        raise ValueError("tau must be non-negative")
    tau = min(tau, p - 1)
    if tau == 0:
        coef = np.zeros(gram.shape[:-1] + (0,))
        return coef, _floor_residuals(diag)
    idx, valid = _windows(p, tau)
    both = valid[:, :, None] & valid[:, None, :]
    win = gram[..., idx[:, :, None], idx[:, None, :]]
    win = np.where(both, win, np.eye(tau))
    rhs = np.where(valid, gram[..., idx, np.arange(p)[:, None]], 0.0)
    try:
        np.linalg.cholesky(win)
    except np.linalg.LinAlgError:
        win = _ridge_singular(win)
    coef = np.linalg.solve(win, rhs[..., None])[..., 0]
    resid = diag - np.sum(coef * rhs, axis=-1)
    return coef, _floor_residuals(resid)


def _ridge_singular(win: np.ndarray) -> np.ndarray:
    tr = np.trace(win, axis1=-2, axis2=-1)
    eig_min = np.linalg.eigvalsh(win)[..., 0]
    bad = eig_min <= 1e-12 * np.maximum(tr, 1e-300)
    k = win.shape[-1]
    ridge = np.where(bad, RIDGE * np.maximum(tr, 1e-12), 0.0)
    return win + ridge[..., None, None] * np.eye(k)


def _floor_residuals(d: np.ndarray) -> np.ndarray:
    low = d < RESIDUAL_FLOOR
    if np.any(low):
        warnings.warn(
            f"{int(low.sum())} residual variance(s) below {RESIDUAL_FLOOR:g} were floored",
            RuntimeWarning,
            stacklevel=3,
        )
        d = np.where(low, RESIDUAL_FLOOR, d)
    return d


def coef_to_dense(coef: np.ndarray, tau: int) -> np.ndarray:
    """Lower-triangular ``A`` from window coefficients (2-d only)."""
    p = coef.shape[0]
    a = np.zeros((p, p))
    if tau == 0:
        return a
    idx, valid = _windows(p, coef.shape[1])
    rows = np.broadcast_to(np.arange(p)[:, None], idx.shape)
    a[rows[valid], idx[valid]] = coef[valid]
    return a


def residual_transform(coef: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``(I - A) x`` along the last axis; ``coef`` may be batched like ``x``."""
    tau = coef.shape[-1]
    if tau == 0:
        return x.copy()
    p = x.shape[-1]
    idx, valid = _windows(p, tau)
    lagged = np.where(valid, x[..., idx], 0.0)
    return x - np.sum(coef * lagged, axis=-1)


def residual_transform_t(coef: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``(I - A)^T u`` along the last axis."""
    tau = coef.shape[-1]
    out = u.copy()
    if tau == 0:
        return out
    p = u.shape[-1]
    for i in range(tau):
        lag = tau - i
        # coef[..., j, i] multiplies coordinate j - lag
        contrib = coef[..., lag:, i] * u[..., lag:]
        out[..., : p - lag] -= contrib
    return out


def omega_diagonal(coef: np.ndarray, d: np.ndarray, kappa: float) -> np.ndarray:
    """Diagonal of ``(I - A)^T D^{-1} (I - A) / (1 - kappa)`` from banded pieces."""
    tau = coef.shape[-1]
    out = 1.0 / d
    p = d.shape[-1]
    for i in range(tau):
        lag = tau - i
        out[..., : p - lag] += coef[..., lag:, i] ** 2 / d[..., lag:]
    return out / (1.0 - kappa)


def omega_apply(coef: np.ndarray, d: np.ndarray, kappa: float, x: np.ndarray) -> np.ndarray:
    """``Omega_hat x`` without forming the matrix."""
    return residual_transform_t(coef, residual_transform(coef, x) / d) / (1.0 - kappa)


def _assemble(coef: np.ndarray, d: np.ndarray, tau: int, kappa: float) -> PrecisionEstimate:
    a = coef_to_dense(coef, tau)
    i_minus_a = np.eye(d.size) - a
    omega = i_minus_a.T @ (i_minus_a / d[:, None]) / (1.0 - kappa)
    omega = (omega + omega.T) / 2.0
    return PrecisionEstimate(a_hat=a, d_hat=d, omega_hat=omega, tau=tau, kappa=kappa, coef=coef)


def fit_banded_cholesky(data: TwoSampleData, tau: int) -> PrecisionEstimate:
    """Estimate ``{(1 - kappa) Sigma_1 + kappa Sigma_2}^{-1}`` with band width ``tau``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    tau = min(tau, data.p - 1)
    coef, d = cholesky_regression(pooled_gram(data), tau)
    return _assemble(coef, d, tau, data.kappa)


def fit_one_sample(sample: np.ndarray, tau: int) -> PrecisionEstimate:
    """One-sample version: estimates ``Sigma^{-1}`` (``kappa`` = 0)."""
    sample = np.asarray(sample, dtype=float)
    tau = min(tau, sample.shape[1] - 1)
    coef, d = cholesky_regression(sample_gram(sample), tau)
    return _assemble(coef, d, tau, 0.0)


def cholesky_covariance_factor(coef: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Lower factor ``L = (I - A)^{-1} D^{1/2}`` so that ``Sigma_hat = L L^T``."""
    tau = coef.shape[-1]
    i_minus_a = np.eye(d.size) - coef_to_dense(coef, tau)
    return linalg.solve_triangular(
        i_minus_a, np.diag(np.sqrt(d)), lower=True, unit_diagonal=True, check_finite=False
    )


def one_sample_covariance_via_cholesky(sample: np.ndarray, tau: int) -> np.ndarray:
    """``Sigma_hat = (I - A)^{-1} D (I - A)^{-T}`` from one sample's rows."""
    sample = np.asarray(sample, dtype=float)
    tau = min(tau, sample.shape[1] - 1)
    coef, d = cholesky_regression(sample_gram(sample), tau)
    factor = cholesky_covariance_factor(coef, d)
    cov = factor @ factor.T
    return (cov + cov.T) / 2.0


def _pooled_rows(sample: Union[np.ndarray, TwoSampleData]):
    if isinstance(sample, TwoSampleData):
        rows = np.vstack(
            (sample.x1 - sample.x1.mean(axis=0), sample.x2 - sample.x2.mean(axis=0))
        )
        return rows, sample.n
    rows = np.asarray(sample, dtype=float)
    return rows, float(rows.shape[0])


def default_band_candidates(n: float, p: int) -> list:
    return list(range(0, int(min(MAX_DEFAULT_BAND, math.floor(n / 2), p - 1)) + 1))


def band_width_risks(
    sample: Union[np.ndarray, TwoSampleData],
    candidates: Optional[Sequence[int]] = None,
    n_splits: int = DEFAULT_SPLITS,
    seed: int = 0,
) -> dict:
    """Average Frobenius distance between split-half Cholesky covariance and the other half's sample covariance.

    Two-sample input is centered per sample and pooled. Candidates that
    cannot be fit on a half (``tau >= half - 1``) are left out of the result.
    """
    rows, n = _pooled_rows(sample)
    n_rows, p = rows.shape
    if candidates is None:
        candidates = default_band_candidates(n, p)
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ValueError("no band-width candidates given")
    half = n_rows // 2
    usable = [c for c in candidates if 0 <= c < max(half - 1, 1) and c <= p - 1]
    if not usable:
        raise ValueError(
            f"no candidate band width can be fit on splits of {half} rows: {candidates}"
        )
    rng = np.random.default_rng(seed)
    totals = {c: 0.0 for c in usable}
    for _ in range(n_splits):
        perm = rng.permutation(n_rows)
        first, second = rows[perm[:half]], rows[perm[half:]]
        gram = sample_gram(first)
        target = np.cov(second, rowvar=False, ddof=1)
        for c in usable:
            coef, d = cholesky_regression(gram, c)
            factor = cholesky_covariance_factor(coef, d)
            totals[c] += float(np.linalg.norm(factor @ factor.T - target, "fro"))
    return {c: totals[c] / n_splits for c in usable}


def select_band_width(
    sample: Union[np.ndarray, TwoSampleData],
    candidates: Optional[Sequence[int]] = None,
    n_splits: int = DEFAULT_SPLITS,
    seed: int = 0,
) -> int:
    """Band width minimizing the random-split risk; ties go to the smaller width."""
    risks = band_width_risks(sample, candidates, n_splits, seed)
    best = min(risks.items(), key=lambda kv: (kv[1], kv[0]))
    return best[0]


def spectral_error(a: np.ndarray, b: np.ndarray, rtol: float = 1e-6, max_iter: int = 100_000) -> float:
    """Largest singular value of ``a - b`` by power iteration on ``(a-b)^T (a-b)``."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if diff.shape != np.shape(b):
        raise ValueError("spectral_error needs equal shapes")
    if not np.any(diff):
        return 0.0
    gram = diff.T @ diff
    v = np.linspace(1.0, 2.0, gram.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector orthogonal to the range: restart from a coordinate axis
            v = np.zeros_like(v)
            v[np.argmax(np.abs(np.diag(gram)))] = 1.0
            continue
        new = float(v @ w)
        v = w / norm
        if abs(new - est) <= rtol * 1e-3 * abs(new):
            est = new
            break
        est = new
    return math.sqrt(max(est, 0.0))
