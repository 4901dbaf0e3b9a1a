"""Grouped two-sample testing over user data with Benjamini-Hochberg control.

Inputs are three CSV files: an expression matrix (first column subject id,
one column per feature), sample labels (``subject,sample`` with sample 1
or 2) and feature groups (``group_id,features`` with a comma-separated
feature list). An optional fourth file (``feature,position``) orders the
features inside each group, e.g. by genomic location.
"""

from __future__ import annotations

import csv
import functools
import json
import math
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO

import numpy as np

from .bootstrap import DEFAULT_B, bootstrap_null
from .core import cq_test, multi_threshold_test
from .data import DataError, TwoSampleData
from .parallel import parallel_map
from .precision import fit_banded_cholesky, select_band_width
from .transform import transform_with_estimate, transformed_test

PIPELINE_METHODS = ("CQ", "MultiThresh", "TransformedMulti")
CALIBRATIONS = ("bootstrap", "gumbel")
DEFAULT_MIN_GROUP = 20
REPORT_COLUMNS = (
    "group_id", "size", "method", "statistic", "p_raw", "bh_adjusted",
    "reject_at_fdr", "pvalue_source", "error",
)


@dataclass
class GroupedDataset:
    """Expression matrix with sample labels and feature groups.

    ``groups`` maps a group id to column indices (already ordered);
    ``skipped`` records groups dropped at load time and why.
    """

    expression: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    groups: Dict[str, List[int]]
    subjects: List[str] = field(default_factory=list)
    skipped: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.expression.ndim != 2:
            raise DataError("expression must be a 2-d matrix")
        if self.labels.shape != (self.expression.shape[0],):
            raise DataError("need exactly one label per expression row")
        if not np.all(np.isin(self.labels, (1, 2))):
            raise DataError("labels must be 1 or 2")
        for s in (1, 2):
            if np.sum(self.labels == s) < 2:
                raise DataError(f"sample {s} has fewer than 2 subjects")
        p = self.expression.shape[1]
        for gid, cols in self.groups.items():
            if not cols:
                raise DataError(f"group {gid!r} is empty")
            if min(cols) < 0 or max(cols) >= p:
                raise DataError(f"group {gid!r} has a column index outside [0, {p})")

    def group_data(self, gid: str) -> TwoSampleData:
        cols = self.groups[gid]
        return TwoSampleData(self.expression[self.labels == 1][:, cols],
                             self.expression[self.labels == 2][:, cols])


@dataclass
class GroupReport:
    group_id: str
    size: int
    method: str
    statistic: float
    p_raw: float
    bh_adjusted: float = math.nan
    reject_at_fdr: bool = False
    pvalue_source: Optional[str] = None
    error: Optional[str] = None


def _read_rows(path) -> List[List[str]]:
    try:
        with open(path, newline="") as fh:
            return [row for row in csv.reader(fh) if any(cell.strip() for cell in row)]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _parse_float(cell: str, path, row: int, col: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}: non-numeric value {cell!r} at row {row}, column {col!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{path}: non-finite value {cell!r} at row {row}, column {col!r}")
    return value


def _load_expression(path):
    rows = _read_rows(path)
    if len(rows) < 2:
        raise DataError(f"{path}: expected a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    features = header[1:]
    if len(set(features)) != len(features):
        raise DataError(f"{path}: duplicate feature names in header")
    subjects, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        subjects.append(row[0].strip())
        values.append([_parse_float(c, path, i, features[j]) for j, c in enumerate(row[1:])])
    return subjects, features, np.array(values, dtype=float)


def _load_labels(path, subjects: Sequence[str]) -> np.ndarray:
    rows = _read_rows(path)
    mapping = {}
    for i, row in enumerate(rows[1:], start=2):
        if len(row) < 2:
            raise DataError(f"{path}: row {i} needs subject and sample columns")
        label = row[1].strip()
        if label not in ("1", "2"):
            raise DataError(f"{path}: row {i} has sample {label!r}, expected 1 or 2")
        mapping[row[0].strip()] = int(label)
    missing = [s for s in subjects if s not in mapping]
    if missing:
        raise DataError(f"{path}: no label for subject(s) {missing[:5]}")
    return np.array([mapping[s] for s in subjects])


def _load_order(path) -> Dict[str, float]:
    rows = _read_rows(path)
    return {row[0].strip(): _parse_float(row[1], path, i, "position")
            for i, row in enumerate(rows[1:], start=2)}


def _load_groups(path, features: Sequence[str], order: Optional[Dict[str, float]], min_size: int):
    index = {f: j for j, f in enumerate(features)}
    groups, skipped = {}, {}
    for i, row in enumerate(_read_rows(path)[1:], start=2):
        if len(row) < 2:
            raise DataError(f"{path}: row {i} needs group_id and features columns")
        gid = row[0].strip()
        if gid in groups or gid in skipped:
            raise DataError(f"{path}: group {gid!r} listed twice")
        names = [n.strip() for n in ",".join(row[1:]).split(",") if n.strip()]
        unique = list(dict.fromkeys(names))
        if len(unique) < len(names):
            warnings.warn(f"group {gid!r}: duplicate features removed", RuntimeWarning, stacklevel=3)
        unknown = [n for n in unique if n not in index]
        if unknown:
            raise DataError(f"{path}: group {gid!r} names unknown feature(s) {unknown[:5]}")
        if order is not None:
            # features without a position keep their listed order after positioned ones
            unique.sort(key=lambda n: (n not in order, order.get(n, 0.0)))
        if len(unique) < min_size:
            skipped[gid] = f"size {len(unique)} below minimum {min_size}"
            warnings.warn(f"group {gid!r} skipped: {skipped[gid]}", RuntimeWarning, stacklevel=3)
            continue
        groups[gid] = [index[n] for n in unique]
    return groups, skipped


def load_dataset(
    expr_path,
    labels_path,
    groups_path,
    feature_order_path=None,
    min_group_size: int = DEFAULT_MIN_GROUP,
) -> GroupedDataset:
    """Read and validate the three (or four) input files."""
    subjects, features, expression = _load_expression(expr_path)
    labels = _load_labels(labels_path, subjects)
    order = _load_order(feature_order_path) if feature_order_path is not None else None
    groups, skipped = _load_groups(groups_path, features, order, min_group_size)
    return GroupedDataset(expression, labels, list(features), groups, subjects, skipped)


def standardize_columns(ds: GroupedDataset) -> GroupedDataset:
    """Center each feature at its grand mean and divide by the pooled within-sample SD."""
    x = ds.expression
    pooled = np.zeros(x.shape[1])
    dof = 0
    for s in (1, 2):
        block = x[ds.labels == s]
        pooled += ((block - block.mean(axis=0)) ** 2).sum(axis=0)
        dof += block.shape[0] - 1
    sd = np.sqrt(pooled / dof)
    safe = np.where(sd > 0, sd, 1.0)
    # zero-variance features stay unscaled; tests on groups containing them report the failure
    z = (x - x.mean(axis=0)) / safe
    return GroupedDataset(z, ds.labels, ds.feature_names, ds.groups, ds.subjects, ds.skipped)


def bh_adjust(pvalues: Sequence[float]) -> np.ndarray:
    """Step-up adjusted p-values ``min_{j >= i} m p_(j) / j``, capped at 1."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


def bh_reject(pvalues: Sequence[float], alpha: float) -> np.ndarray:
    """Rejections of the step-up rule: the ``k`` smallest, ``k = max{i : p_(i) <= i alpha / m}``."""
    p = np.asarray(pvalues, dtype=float)
    m = p.size
    order = np.argsort(p, kind="stable")
    passing = np.nonzero(p[order] <= np.arange(1, m + 1) * alpha / m)[0]
    out = np.zeros(m, dtype=bool)
    if passing.size:
        out[order[: passing[-1] + 1]] = True
    return out


def _group_seed(seed: int, gid: str) -> int:
    ss = np.random.SeedSequence([int(seed), zlib.crc32(gid.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _test_one(job, method, calibration, b, seed, alpha, tau):
    gid, data = job
    try:
        gseed = _group_seed(seed, gid)
        if method == "CQ":
            out = cq_test(data, alpha)
        elif method == "MultiThresh":
            bn = None
            if calibration == "bootstrap":
                t = select_band_width(data, seed=gseed) if tau is None else tau
                bn = bootstrap_null(data, "MultiThresh", b, t, gseed)
            out = multi_threshold_test(data, alpha, bootstrap=bn)
        else:
            t = select_band_width(data, seed=gseed) if tau is None else tau
            td = transform_with_estimate(data, fit_banded_cholesky(data, t))
            bn = bootstrap_null(data, "TransformedMulti", b, t, gseed) if calibration == "bootstrap" else None
            out = transformed_test(td, alpha, bootstrap=bn)
        return GroupReport(gid, data.p, method, float(out.statistic), float(out.pvalue),
                           pvalue_source=out.pvalue_source)
    except (DataError, ValueError, np.linalg.LinAlgError) as exc:
        return GroupReport(gid, data.p, method, math.nan, math.nan, error=str(exc))


def test_groups(
    ds: GroupedDataset,
    method: str = "TransformedMulti",
    alpha_fdr: float = 0.05,
    *,
    calibration: str = "bootstrap",
    b: int = DEFAULT_B,
    seed: int = 0,
    standardize: bool = True,
    tau: Optional[int] = None,
    workers: Optional[int] = None,
) -> List[GroupReport]:
    """Test every group, then apply the step-up FDR rule across the successful ones.

    The report is sorted by raw p-value (ties by group id); groups whose
    test failed follow at the end with their error message and are not
    counted in the number of hypotheses.
    """
    if method not in PIPELINE_METHODS:
        raise ValueError(f"method must be one of {PIPELINE_METHODS}, got {method!r}")
    if calibration not in CALIBRATIONS:
        raise ValueError(f"calibration must be one of {CALIBRATIONS}, got {calibration!r}")
    if not 0.0 < alpha_fdr <= 1.0:
        raise ValueError(f"alpha_fdr must lie in (0, 1], got {alpha_fdr}")
    if standardize:
        ds = standardize_columns(ds)
    jobs = [(gid, ds.group_data(gid)) for gid in sorted(ds.groups)]
    fn = functools.partial(_test_one, method=method, calibration=calibration, b=b,
                           seed=seed, alpha=alpha_fdr, tau=tau)
    reports = parallel_map(fn, jobs, workers)
    ok = [r for r in reports if r.error is None]
    failed = sorted((r for r in reports if r.error is not None), key=lambda r: r.group_id)
    for r in failed:
        warnings.warn(f"group {r.group_id!r} failed: {r.error}", RuntimeWarning, stacklevel=2)
    raw = [r.p_raw for r in ok]
    for r, adj, rej in zip(ok, bh_adjust(raw), bh_reject(raw, alpha_fdr)):
        r.bh_adjusted = float(adj)
        r.reject_at_fdr = bool(rej)
    ok.sort(key=lambda r: (r.p_raw, r.group_id))
    return ok + failed


test_groups.__test__ = False  # not a pytest test


def _json_safe(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}


def write_report_stream(reports: Sequence[GroupReport], fh: TextIO, fmt: str = "csv") -> None:
    """Write the report to an open text stream; NaN becomes an empty CSV cell or JSON null."""
    fmt = fmt.lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    rows = [asdict(r) for r in reports]
    if fmt == "csv":
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None or (isinstance(v, float) and math.isnan(v)) else v)
                             for k, v in row.items()})
    else:
        json.dump([_json_safe(row) for row in rows], fh, indent=2)
        fh.write("\n")


def write_report(reports: Sequence[GroupReport], path, fmt: str = "csv") -> None:
    if fmt.lower() not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    try:
        with open(path, "w", newline="") as fh:
            write_report_stream(reports, fh, fmt)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
