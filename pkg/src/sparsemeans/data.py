"""Shared containers: the two-sample input and the outcome of a test."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

METHODS = (
    "CQ",
    "BS",
    "Oracle",
    "SingleThresh",
    "MultiThresh",
    "TransformedSingle",
    "TransformedMulti",
    "CLX_I",
    "CLX_Omega",
)


class DataError(ValueError):
    """Raised when input data violate the two-sample contract."""


@dataclass(frozen=True)
class TwoSampleData:
    """Two samples with aligned coordinates.

    ``x1`` is ``n1 x p`` and ``x2`` is ``n2 x p``; both samples need at
    least two rows because the within-sample U-statistics sum over pairs.
    """

    x1: np.ndarray
    x2: np.ndarray

    def __post_init__(self):
        x1 = np.asarray(self.x1, dtype=float)
        x2 = np.asarray(self.x2, dtype=float)
        if x1.ndim == 1:
            x1 = x1[:, None]
        if x2.ndim == 1:
            x2 = x2[:, None]
        if x1.ndim != 2 or x2.ndim != 2:
            raise DataError("samples must be 2-d arrays (rows = observations)")
        if x1.shape[1] != x2.shape[1]:
            raise DataError(
                f"column mismatch: x1 has {x1.shape[1]} columns, x2 has {x2.shape[1]}"
            )
        if x1.shape[1] < 1:
            raise DataError("need at least one coordinate")
        if x1.shape[0] < 2 or x2.shape[0] < 2:
            raise DataError(
                f"each sample needs >= 2 rows, got n1={x1.shape[0]}, n2={x2.shape[0]}"
            )
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x2))):
            raise DataError("samples contain non-finite entries")
        object.__setattr__(self, "x1", x1)
        object.__setattr__(self, "x2", x2)

    @property
    def n1(self) -> int:
        return self.x1.shape[0]

    @property
    def n2(self) -> int:
        return self.x2.shape[0]

    @property
    def p(self) -> int:
        return self.x1.shape[1]

    @property
    def n(self) -> float:
        """Effective sample size n1*n2/(n1+n2)."""
        return self.n1 * self.n2 / (self.n1 + self.n2)

    @property
    def kappa(self) -> float:
        return self.n1 / (self.n1 + self.n2)

    def columns(self, idx) -> "TwoSampleData":
        idx = np.asarray(idx, dtype=int)
        return TwoSampleData(self.x1[:, idx], self.x2[:, idx])


@dataclass
class TestOutcome:
    """Result of one test.

    ``reject`` is ``standardized >= critical_value``. ``pvalue_source``
    records where the p-value came from ("normal", "gumbel", "clx",
    "bootstrap") or is ``None`` when no p-value is defined.
    """

    __test__ = False  # not a pytest class

    method: str
    statistic: float
    standardized: float
    critical_value: float
    alpha: float
    reject: bool
    pvalue: Optional[float] = None
    pvalue_source: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        return asdict(self)
