"""Command-line entry point: simulations, single tests, grouped testing and boundary tables.

Exit status is 0 on success, 1 on a usage error (bad flags, unknown
config keys, invalid values) and 2 on a runtime failure (unreadable
input, invalid data, a failing cell).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import itertools
import json
import math
import sys
import time
from importlib import resources
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import pipeline
from .bootstrap import bootstrap_null
from .core import DetectionPoint, bs_test, cq_test, detection_boundary, multi_threshold_test
from .data import DataError, TwoSampleData
from .parallel import WORKERS_ENV, default_workers
from .precision import fit_banded_cholesky, select_band_width
from .simulation import SimulationConfig, run_power, run_size, write_results
from .transform import clx_statistics, clx_test, transform_with_estimate, transformed_test

PRESETS = ("table1-desk", "table1-full", "fig1-desk")
TEST_METHODS = ("cq", "bs", "multi", "transformed", "clx", "clx-transformed")
META_KEYS = ("description",)

_INT_KEYS = {"p", "n1", "n2", "replicates", "seed", "bootstrap_b"}
_FLOAT_KEYS = {"beta", "r", "rho", "alpha", "eta", "eta_star", "theta"}
_BOOL_KEYS = {"size_adjust", "known_variance"}


class UsageError(Exception):
    """Bad command-line input; reported with exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` unless the help text already states one."""

    def _get_help_string(self, action):
        if "(default" in (action.help or ""):
            return action.help
        if action.required:
            return f"{action.help} (required)"
        return super()._get_help_string(action)


# ---------------------------------------------------------------- config grids

def parse_range(text: str) -> List[float]:
    """``"a:b:step"`` to the inclusive list ``a, a+step, ..., <= b``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range {text!r} must look like start:stop:step")
    try:
        start, stop, step = (float(x) for x in parts)
    except ValueError:
        raise UsageError(f"range {text!r} has a non-numeric part") from None
    if step <= 0 or stop < start:
        raise UsageError(f"range {text!r} needs step > 0 and stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9))
    return [round(start + i * step, 12) for i in range(count + 1)]


def _scalar(key: str, value):
    if key in _INT_KEYS:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise UsageError(f"config key {key!r} needs an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r} needs an integer, got {value!r}") from None
    if key in _FLOAT_KEYS:
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            if key == "theta":
                return None
            raise UsageError(f"config key {key!r} needs a number")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise UsageError(f"config key {key!r} needs a number, got {value!r}") from None
    if key in _BOOL_KEYS:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {key!r} needs true or false, got {value!r}")
    return str(value)


def _axis(key: str, value) -> list:
    """Values of one config key: a list or a start:stop:step range gives a grid axis."""
    if key == "tests":
        names = value.split(",") if isinstance(value, str) else list(value)
        return [tuple(n.strip() for n in names if str(n).strip())]
    if isinstance(value, str) and value.count(":") == 2 and key in _FLOAT_KEYS | _INT_KEYS:
        return [_scalar(key, v) for v in parse_range(value)]
    if isinstance(value, list):
        if not value:
            raise UsageError(f"config key {key!r} has an empty list")
        return [_scalar(key, v) for v in value]
    return [_scalar(key, value)]


def _coerce_text(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip("'\"")


def parse_keyvalue(text: str, origin: str) -> Dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment; values may be JSON lists."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected key = value")
        key, raw = line.split("=", 1)
        out[key.strip()] = _coerce_text(raw)
    return out


def load_config(path: str) -> Dict[str, object]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from exc
    return parse_keyvalue(text, path)


def load_preset(name: str) -> Dict[str, object]:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("sparsemeans").joinpath("presets", f"{name}.json").read_text()
    return json.loads(text)


def expand_grid(settings: Dict[str, object]) -> List[SimulationConfig]:
    """Cartesian product over list- or range-valued keys, in key order of the fields."""
    fields = [f.name for f in dataclasses.fields(SimulationConfig)]
    for key in settings:
        if key not in fields and key not in META_KEYS:
            raise UsageError(f"unknown config key {key!r}")
    keys = [k for k in fields if k in settings]
    axes = [_axis(k, settings[k]) for k in keys]
    cells = []
    for combo in itertools.product(*axes):
        try:
            cells.append(SimulationConfig(**dict(zip(keys, combo))))
        except ValueError as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
    return cells


def _simulation_settings(args) -> Dict[str, object]:
    settings: Dict[str, object] = {}
    if args.preset:
        settings.update(load_preset(args.preset))
    if args.config:
        settings.update(load_config(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        settings[key.strip()] = _coerce_text(raw)
    if args.seed is not None:
        settings["seed"] = args.seed
    return settings


# ---------------------------------------------------------------- output helpers

@contextlib.contextmanager
def _open_output(path: Optional[str]):
    if path is None or path == "-":
        yield sys.stdout
        return
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    with fh:
        yield fh


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _threads(args) -> int:
    return args.threads if args.threads is not None else default_workers()


# ---------------------------------------------------------------- subcommands

def cmd_simulate(args) -> int:
    cells = expand_grid(_simulation_settings(args))
    workers = _threads(args)
    results = []
    for i, cfg in enumerate(cells, start=1):
        start = time.perf_counter()
        if args.command == "simulate-size":
            results.append(run_size(cfg, workers))
        else:
            results.extend(run_power([cfg], workers=workers))
        _log(f"cell {i}/{len(cells)} done in {time.perf_counter() - start:.1f}s")
        if results[-1].levels:
            _log("  adjusted levels: " + ", ".join(f"{t}={lv:.4g}" for t, lv in results[-1].levels.items()))
    with _open_output(args.output) as fh:
        write_results(results, fh, args.format)
    return 0


def read_matrix(path: str) -> np.ndarray:
    """Numeric CSV with rows as observations; a non-numeric first row is taken as a header."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    out = []
    for i, row in enumerate(rows, start=1):
        try:
            out.append([float(c) for c in row])
        except ValueError:
            raise DataError(f"{path}: non-numeric value in data row {i}") from None
    if len({len(r) for r in out}) > 1:
        raise DataError(f"{path}: rows have different lengths")
    return np.array(out, dtype=float)


def _band(data: TwoSampleData, args) -> int:
    return args.tau if args.tau is not None else select_band_width(data, seed=args.seed)


def run_single_test(data: TwoSampleData, args):
    method, alpha, known = args.method, args.alpha, args.known_variance
    if method == "cq":
        return cq_test(data, alpha, known)
    if method == "bs":
        return bs_test(data, alpha, known)
    if method == "multi":
        bn = None
        if args.bootstrap:
            bn = bootstrap_null(data, "MultiThresh", args.bootstrap, _band(data, args), args.seed,
                                eta=args.eta, known_unit_variance=known)
        return multi_threshold_test(data, alpha, args.eta, known_unit_variance=known, bootstrap=bn)
    if method == "clx":
        g, _ = clx_statistics(data, known_unit_variance=known)
        return clx_test(g, data.p, alpha, "CLX_I")
    tau = _band(data, args)
    est = fit_banded_cholesky(data, tau)
    if method == "clx-transformed":
        _, g = clx_statistics(data, est)
        return clx_test(g, data.p, alpha, "CLX_Omega")
    bn = bootstrap_null(data, "TransformedMulti", args.bootstrap, tau, args.seed) if args.bootstrap else None
    return transformed_test(transform_with_estimate(data, est), alpha, args.theta, bootstrap=bn)


def cmd_test(args) -> int:
    data = TwoSampleData(read_matrix(args.x1), read_matrix(args.x2))
    out = run_single_test(data, args)
    record = {
        "method": out.method,
        "statistic": out.statistic,
        "standardized": out.standardized,
        "critical_value": out.critical_value,
        "alpha": out.alpha,
        "pvalue": out.pvalue,
        "pvalue_source": out.pvalue_source,
        "decision": "reject" if out.reject else "retain",
    }
    with _open_output(args.output) as fh:
        if args.format == "json":
            json.dump(record, fh, indent=2)
            fh.write("\n")
        else:
            for key, value in record.items():
                fh.write(f"{key}: {value}\n")
    return 0


def cmd_geneset(args) -> int:
    ds = pipeline.load_dataset(args.expr, args.labels, args.groups, args.feature_order, args.min_group_size)
    reports = pipeline.test_groups(
        ds, args.method, args.fdr, calibration=args.calibration, b=args.bootstrap, seed=args.seed,
        standardize=not args.no_standardize, tau=args.tau, workers=_threads(args),
    )
    with _open_output(args.output) as fh:
        pipeline.write_report_stream(reports, fh, args.format)
    _log(f"{sum(r.reject_at_fdr for r in reports)} of {len(reports)} groups rejected at FDR {args.fdr}")
    return 0


def cmd_boundary(args) -> int:
    if args.theta is not None and not 0.0 < args.theta < 1.0:
        raise UsageError(f"--theta must lie in (0, 1), got {args.theta}")
    betas = [b for b in parse_range(args.beta) if 0.5 <= b < 1.0]
    if not betas:
        raise UsageError(f"--beta {args.beta} has no value in [0.5, 1)")
    with _open_output(args.output) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["beta", "rho", "rho_theta"])
        for b in betas:
            rho, rho_theta = detection_boundary(DetectionPoint(b, theta=args.theta))
            writer.writerow([f"{b:.12g}", f"{rho:.12g}", "" if rho_theta is None else f"{rho_theta:.12g}"])
    return 0


# ---------------------------------------------------------------- parser

def _add_common(p: argparse.ArgumentParser, output_help: str) -> None:
    p.add_argument("--output", "-o", default=None, help=output_help)
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")


def _add_threads(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default: ${WORKERS_ENV} or the CPU count)")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="sparsemeans", description="High-dimensional two-sample mean tests.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    for name, text in (("simulate-size", "empirical sizes over a grid of null cells"),
                       ("simulate-power", "rejection rates over a grid of cells, optionally size adjusted")):
        p = sub.add_parser(name, help=text, description=text, formatter_class=fmt)
        p.add_argument("--preset", choices=PRESETS, default=None, help="bundled grid (default: none)")
        p.add_argument("--config", default=None, help="JSON or key=value grid file, applied after --preset (default: none)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", default=None,
                       help="override one config key; lists and start:stop:step ranges make grid axes (default: none)")
        p.add_argument("--seed", type=int, default=None, help="master seed overriding the config (default: from config, else 0)")
        _add_common(p, "result file (default: standard output)")
        _add_threads(p)
        p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("test", help="run one test on two CSV matrices", description="run one test on two CSV matrices",
                       formatter_class=fmt)
    p.add_argument("--method", choices=TEST_METHODS, required=True, help="test to run")
    p.add_argument("--x1", required=True, help="first sample, rows are observations")
    p.add_argument("--x2", required=True, help="second sample, rows are observations")
    p.add_argument("--alpha", type=float, default=0.05, help="significance level")
    p.add_argument("--eta", type=float, default=0.05, help="upper level margin of the threshold grid")
    p.add_argument("--theta", type=float, default=None, help="log n / log p for the transformed test (default: from data)")
    p.add_argument("--tau", type=int, default=None, help="band width (default: selected by sample splitting)")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap copies for multi/transformed; 0 uses the Gumbel limit")
    p.add_argument("--known-variance", action="store_true", help="treat coordinate variances as 1")
    p.add_argument("--seed", type=int, default=0, help="seed for band selection and bootstrap")
    p.add_argument("--output", "-o", default=None, help="where to print the outcome (default: standard output)")
    p.add_argument("--format", choices=("text", "json"), default="text", help="key: value lines or a JSON object")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("geneset", help="grouped testing with FDR control", description="grouped testing with FDR control",
                       formatter_class=fmt)
    p.add_argument("--expr", required=True, help="expression CSV: subject column, then one column per feature")
    p.add_argument("--labels", required=True, help="labels CSV: subject,sample (sample is 1 or 2)")
    p.add_argument("--groups", required=True, help="groups CSV: group_id,comma-separated feature names")
    p.add_argument("--feature-order", default=None, help="optional CSV: feature,position used to order groups (default: listed order)")
    p.add_argument("--method", choices=pipeline.PIPELINE_METHODS, default="TransformedMulti", help="per-group test")
    p.add_argument("--fdr", type=float, default=0.05, help="false discovery rate level")
    p.add_argument("--calibration", choices=pipeline.CALIBRATIONS, default="bootstrap",
                   help="p-value source for the thresholding tests")
    p.add_argument("--bootstrap", type=int, default=300, help="bootstrap copies per group")
    p.add_argument("--tau", type=int, default=None, help="band width (default: selected per group)")
    p.add_argument("--min-group-size", type=int, default=pipeline.DEFAULT_MIN_GROUP, help="smaller groups are skipped")
    p.add_argument("--no-standardize", action="store_true", help="skip pooled-SD column scaling")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    _add_common(p, "report file (default: standard output)")
    _add_threads(p)
    p.set_defaults(func=cmd_geneset)

    p = sub.add_parser("boundary", help="tabulate detection boundaries over a beta grid",
                       description="tabulate detection boundaries over a beta grid", formatter_class=fmt)
    p.add_argument("--beta", default="0.5:1.0:0.05", help="start:stop:step; values outside [0.5, 1) are dropped")
    p.add_argument("--theta", type=float, default=None, help="also tabulate the boundary with an estimated precision matrix")
    p.add_argument("--output", "-o", default=None, help="CSV file (default: standard output)")
    p.set_defaults(func=cmd_boundary)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
