"""Monte Carlo harness: AR(1) data, size tables and size-adjusted power.

Every random draw comes from a stream keyed by
``(seed, cell id, replicate, purpose)``. The cell id hashes only the
parameters that shape the null data, so a power cell with ``r = 0``
reproduces the size cell exactly. Replicates are independent jobs and are
collected in index order, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import math
import time
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, TextIO, Tuple

import numpy as np

from .bootstrap import bootstrap_null
from .core import DEFAULT_ETA, component_stats, cq_test, multi_threshold_test, oracle_test
from .data import TwoSampleData
from .parallel import parallel_map
from .precision import fit_banded_cholesky, select_band_width
from .transform import DEFAULT_ETA_STAR, clx_test, transform_with_estimate, transformed_test

TESTS = ("CQ", "Oracle", "CLX1", "CLX2", "Mult1", "Mult2", "Mult1*", "Mult2*")
INNOVATIONS = ("gaussian", "gamma")
EXPORT_COLUMNS = (
    "p", "n1", "n2", "beta", "r", "rho", "innovation", "alpha",
    "test", "reject_rate", "se", "replicates", "seed",
)
ALPHA_BRACKET = (1e-5, 1.0)
BISECTION_STEPS = 8

# stream purposes
_POSITIONS, _SAMPLE1, _SAMPLE2, _BAND, _BOOT1, _BOOT2 = range(6)


@dataclass(frozen=True)
class SimulationConfig:
    """One simulation cell.

    ``known_variance`` standardizes the untransformed statistics by the
    true unit variances; ``variant`` picks the thresholded quantity for
    Mult1/Mult1* (``"L1"``: U-statistics, ``"L2"``: squared mean
    differences).
    """

    p: int = 200
    n1: int = 30
    n2: int = 40
    beta: float = 0.5
    r: float = 0.0
    rho: float = 0.6
    innovation: str = "gaussian"
    alpha: float = 0.05
    replicates: int = 1000
    seed: int = 0
    tests: Tuple[str, ...] = TESTS
    size_adjust: bool = False
    bootstrap_b: int = 300
    known_variance: bool = True
    variant: str = "L1"
    eta: float = DEFAULT_ETA
    eta_star: float = DEFAULT_ETA_STAR
    theta: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "tests", tuple(self.tests))
        object.__setattr__(self, "innovation", str(self.innovation).lower())
        problems = []
        if self.p < 3:
            problems.append(f"p must be >= 3, got {self.p}")
        if self.n1 < 3 or self.n2 < 3:
            problems.append(f"n1 and n2 must be >= 3, got ({self.n1}, {self.n2})")
        if not 0.0 <= self.beta <= 1.0:
            problems.append(f"beta must lie in [0, 1], got {self.beta}")
        if not (self.r >= 0.0 and math.isfinite(self.r)):
            problems.append(f"r must be finite and >= 0, got {self.r}")
        if not -1.0 < self.rho < 1.0:
            problems.append(f"rho must lie in (-1, 1), got {self.rho}")
        if self.innovation not in INNOVATIONS:
            problems.append(f"innovation must be one of {INNOVATIONS}, got {self.innovation!r}")
        if not 0.0 < self.alpha <= 1.0:
            problems.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.replicates < 1:
            problems.append(f"replicates must be >= 1, got {self.replicates}")
        unknown = [t for t in self.tests if t not in TESTS]
        if unknown or not self.tests:
            problems.append(f"tests must be a non-empty subset of {TESTS}, got {list(self.tests)}")
        if any(t.endswith("*") for t in self.tests) and self.bootstrap_b < 100:
            problems.append(f"bootstrap_b must be >= 100, got {self.bootstrap_b}")
        if self.variant not in ("L1", "L2"):
            problems.append(f"variant must be 'L1' or 'L2', got {self.variant!r}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def n(self) -> float:
        return self.n1 * self.n2 / (self.n1 + self.n2)

    @property
    def signal_count(self) -> int:
        """``floor(p^(1 - beta))``, at least 1 (the Oracle always needs a set)."""
        return max(1, int(math.floor(self.p ** (1.0 - self.beta) + 1e-9)))

    @property
    def signal_forced(self) -> bool:
        return math.floor(self.p ** (1.0 - self.beta) + 1e-9) < 1

    @property
    def signal_value(self) -> float:
        return math.sqrt(2.0 * self.r * math.log(self.p) / self.n)

    def null_cell(self) -> "SimulationConfig":
        return dataclasses.replace(self, r=0.0)


@dataclass
class CellResult:
    """Rejection frequencies of one cell, with binomial standard errors."""

    config: SimulationConfig
    rates: Dict[str, float]
    se: Dict[str, float]
    replicates: int
    levels: Dict[str, float] = field(default_factory=dict)
    flags: Tuple[str, ...] = ()
    wall_time: float = 0.0
    pvalues: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def cell_id(cfg: SimulationConfig) -> int:
    key = f"{cfg.p}|{cfg.n1}|{cfg.n2}|{cfg.rho!r}|{cfg.innovation}"
    return zlib.crc32(key.encode())


def _stream(cfg: SimulationConfig, replicate: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(cfg.seed), cell_id(cfg), int(replicate), purpose])
    )


def _derived_seed(cfg: SimulationConfig, replicate: int, purpose: int) -> int:
    ss = np.random.SeedSequence([int(cfg.seed), cell_id(cfg), int(replicate), purpose])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@functools.lru_cache(maxsize=16)
def ar1_factor(p: int, rho: float) -> np.ndarray:
    """Lower Cholesky factor of ``rho^|i-j|``."""
    idx = np.arange(p)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def _innovations(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "gamma":
        # Gamma(shape 4, scale 0.5) has mean 2 and variance 1
        return rng.gamma(4.0, 0.5, size=shape) - 2.0
    return rng.standard_normal(shape)


def signal_positions(cfg: SimulationConfig, replicate: int) -> np.ndarray:
    rng = _stream(cfg, replicate, _POSITIONS)
    return np.sort(rng.choice(cfg.p, size=cfg.signal_count, replace=False))


def gen_two_samples(cfg: SimulationConfig, replicate: int) -> Tuple[TwoSampleData, np.ndarray]:
    """Data of one replicate and the planted signal positions.

    The first sample has mean zero; the second carries ``signal_value`` at
    the planted positions (all zero when ``r = 0``).
    """
    factor = ar1_factor(cfg.p, float(cfg.rho))
    positions = signal_positions(cfg, replicate)
    z1 = _innovations(_stream(cfg, replicate, _SAMPLE1), (cfg.n1, cfg.p), cfg.innovation)
    z2 = _innovations(_stream(cfg, replicate, _SAMPLE2), (cfg.n2, cfg.p), cfg.innovation)
    x1 = z1 @ factor.T
    x2 = z2 @ factor.T
    if cfg.r > 0:
        x2[:, positions] += cfg.signal_value
    return TwoSampleData(x1, x2), positions


def run_replicate(cfg: SimulationConfig, replicate: int) -> Dict[str, Tuple[float, bool]]:
    """``{test: (p-value, reject at cfg.alpha)}`` for one replicate."""
    data, positions = gen_two_samples(cfg, replicate)
    tests = set(cfg.tests)
    known = cfg.known_variance
    out = {}
    cs = component_stats(data, known)

    tau = None
    if tests & {"CLX2", "Mult2", "Mult1*", "Mult2*"}:
        tau = select_band_width(data, seed=_derived_seed(cfg, replicate, _BAND))
    td = None
    if tests & {"CLX2", "Mult2"}:
        td = transform_with_estimate(data, fit_banded_cholesky(data, tau))

    def record(name, outcome):
        out[name] = (float(outcome.pvalue), bool(outcome.reject))

    if "CQ" in tests:
        record("CQ", cq_test(data, cfg.alpha, known, cs=cs))
    if "Oracle" in tests:
        record("Oracle", oracle_test(data, positions, cfg.alpha, known, cs=cs))
    if "CLX1" in tests:
        record("CLX1", clx_test(float(np.max(cs.m_std)), cfg.p, cfg.alpha, "CLX_I"))
    if "CLX2" in tests:
        record("CLX2", clx_test(float(np.max(td.values())), cfg.p, cfg.alpha, "CLX_Omega"))
    if "Mult1" in tests:
        record("Mult1", multi_threshold_test(data, cfg.alpha, cfg.eta, cfg.variant, known, cs=cs))
    if "Mult2" in tests:
        record("Mult2", transformed_test(td, cfg.alpha, cfg.theta, cfg.eta_star))
    if "Mult1*" in tests:
        bn = bootstrap_null(
            data, "MultiThresh", cfg.bootstrap_b, tau, _derived_seed(cfg, replicate, _BOOT1),
            eta=cfg.eta, variant=cfg.variant, known_unit_variance=known,
        )
        record("Mult1*", multi_threshold_test(data, cfg.alpha, cfg.eta, cfg.variant, known,
                                              bootstrap=bn, cs=cs))
    if "Mult2*" in tests:
        if td is None:
            td = transform_with_estimate(data, fit_banded_cholesky(data, tau))
        bn = bootstrap_null(
            data, "TransformedMulti", cfg.bootstrap_b, tau, _derived_seed(cfg, replicate, _BOOT2),
            theta=cfg.theta, eta_star=cfg.eta_star,
        )
        record("Mult2*", transformed_test(td, cfg.alpha, cfg.theta, cfg.eta_star, bootstrap=bn))
    return out


def _simulate(cfg: SimulationConfig, workers: Optional[int]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray], float]:
    start = time.perf_counter()
    rows = parallel_map(functools.partial(run_replicate, cfg), list(range(cfg.replicates)), workers)
    pvals = {t: np.array([row[t][0] for row in rows]) for t in cfg.tests}
    rejects = {t: np.array([row[t][1] for row in rows]) for t in cfg.tests}
    return pvals, rejects, time.perf_counter() - start


def _result(cfg, pvals, decisions, levels, wall) -> CellResult:
    rates, se = {}, {}
    for t in cfg.tests:
        f = float(np.mean(decisions[t]))
        rates[t] = f
        se[t] = math.sqrt(f * (1.0 - f) / cfg.replicates)
    flags = ("signal-count-forced-to-1",) if cfg.signal_forced and cfg.r > 0 else ()
    if flags:
        warnings.warn(f"p^(1-beta) < 1 at beta={cfg.beta}; planted one signal", RuntimeWarning, stacklevel=3)
    return CellResult(cfg, rates, se, cfg.replicates, levels, flags, wall, pvals)


def run_cell(cfg: SimulationConfig, workers: Optional[int] = None) -> CellResult:
    """Rejection frequencies at the nominal level ``cfg.alpha``."""
    pvals, rejects, wall = _simulate(cfg, workers)
    return _result(cfg, pvals, rejects, {t: cfg.alpha for t in cfg.tests}, wall)


def run_size(cfg: SimulationConfig, workers: Optional[int] = None) -> CellResult:
    """Empirical sizes: ``run_cell`` with the signal switched off."""
    return run_cell(cfg.null_cell(), workers)


def adjusted_level(null_pvalues: np.ndarray, target: float) -> Optional[float]:
    """Nominal level whose empirical size under the null p-values is closest to ``target`` from below.

    Bisection on ``log(level)`` over ``[1e-5, 1]``; returns ``None`` when even
    the smallest level rejects more often than ``target``.
    """
    lo, hi = ALPHA_BRACKET
    size = lambda a: float(np.mean(null_pvalues <= a))
    if size(lo) > target or size(hi) < target:
        return None
    for _ in range(BISECTION_STEPS):
        mid = math.sqrt(lo * hi)
        if size(mid) > target:
            hi = mid
        else:
            lo = mid
    return lo


def run_power(
    cfgs: Iterable[SimulationConfig],
    size_adjust: Optional[bool] = None,
    workers: Optional[int] = None,
) -> List[CellResult]:
    """Rejection frequencies over a grid of cells.

    With size adjustment each test is run at the nominal level that gives
    empirical size ``alpha`` on the matching null cell (computed once per
    distinct null cell).
    """
    cfgs = list(cfgs)
    if not cfgs:
        raise ValueError("power grid is empty")
    null_cache: Dict[SimulationConfig, Dict[str, np.ndarray]] = {}
    results = []
    for cfg in cfgs:
        adjust = cfg.size_adjust if size_adjust is None else size_adjust
        pvals, rejects, wall = _simulate(cfg, workers)
        if not adjust:
            results.append(_result(cfg, pvals, rejects, {t: cfg.alpha for t in cfg.tests}, wall))
            continue
        null = cfg.null_cell()
        if null == cfg:
            null_p = pvals
        else:
            if null not in null_cache:
                null_cache[null] = _simulate(null, workers)[0]
            null_p = null_cache[null]
        levels, decisions = {}, {}
        for t in cfg.tests:
            level = adjusted_level(null_p[t], cfg.alpha)
            if level is None:
                warnings.warn(
                    f"size adjustment for {t} could not bracket alpha={cfg.alpha}; using nominal",
                    RuntimeWarning,
                    stacklevel=2,
                )
                levels[t] = cfg.alpha
                decisions[t] = rejects[t]
            else:
                levels[t] = level
                decisions[t] = pvals[t] <= level
        results.append(_result(cfg, pvals, decisions, levels, wall))
    return results


def result_rows(results: Iterable[CellResult]) -> List[dict]:
    rows = []
    for res in results:
        c = res.config
        for t in c.tests:
            rows.append({
                "p": c.p, "n1": c.n1, "n2": c.n2, "beta": c.beta, "r": c.r, "rho": c.rho,
                "innovation": c.innovation, "alpha": c.alpha, "test": t,
                "reject_rate": res.rates[t], "se": res.se[t],
                "replicates": res.replicates, "seed": c.seed,
            })
    return rows


def write_results(results: Iterable[CellResult], fh: TextIO, fmt: str = "csv") -> None:
    """Write one row per (cell, test) in a fixed column order to an open text stream."""
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    rows = result_rows(results)
    if fmt == "csv":
        writer = csv.DictWriter(fh, fieldnames=EXPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    else:
        json.dump(rows, fh, indent=2)
        fh.write("\n")


def export_results(results: Iterable[CellResult], path, fmt: str = "csv") -> None:
    """``write_results`` into ``path``; I/O failures name the path."""
    if fmt.lower() not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            write_results(results, fh, fmt)
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
