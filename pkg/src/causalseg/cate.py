"""Segment-level conditional average treatment effects with inference.

The segment CATE is the mean pseudo-outcome within the segment; its standard
error is the within-segment standard deviation over ``sqrt(n_v)``.  One-sided
tests of ``CATE(v) <= theta`` are corrected for the number of segments.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .dataset import SegmentIndex
from .exceptions import ConfigError, DegenerateError
from .learners import FittedLearner, LearnerSpec, LibrarySelection, cv_select
from .nuisance import PseudoOutcomes

CORRECTIONS = ("holm", "bonferroni", "none")
DEFAULT_CORRECTION = "holm"

FLAG_SINGLETON = "singleton"
FLAG_ZERO_VARIANCE = "zero-variance"
# Below this many units the normal interval is a rough guide at best.
SMALL_SEGMENT = 30


@dataclass(frozen=True)
class SegmentCateEstimate:
    segment: tuple
    n_v: int
    proportion: float
    cate: float
    se: float
    ci_lower: float
    ci_upper: float
    p_raw: float = math.nan
    p_adjusted: float = math.nan
    treat: bool = False
    flag: str = ""

    @property
    def testable(self) -> bool:
        return self.flag != FLAG_SINGLETON

    def to_dict(self) -> dict:
        return {
            "segment": list(self.segment), "n_v": self.n_v, "proportion": self.proportion,
            "cate": self.cate, "se": self.se, "ci_lower": self.ci_lower, "ci_upper": self.ci_upper,
            "p_raw": self.p_raw, "p_adjusted": self.p_adjusted, "treat": self.treat, "flag": self.flag,
        }


@dataclass(frozen=True)
class CateTable:
    estimates: tuple[SegmentCateEstimate, ...]
    alpha: float
    z: float
    columns: tuple[str, ...] = ()
    theta: float | None = None
    correction: str | None = None

    @property
    def segments(self) -> tuple:
        return tuple(e.segment for e in self.estimates)

    @property
    def tested(self) -> bool:
        return self.theta is not None

    def row(self, key) -> SegmentCateEstimate:
        key = tuple(key)
        for e in self.estimates:
            if e.segment == key:
                return e
        raise KeyError(key)

    def as_arrays(self) -> dict:
        return {f: np.array([getattr(e, f) for e in self.estimates], dtype=float)
                for f in ("proportion", "cate", "se", "ci_lower", "ci_upper", "p_raw", "p_adjusted")}

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "z": self.z, "theta": self.theta, "correction": self.correction,
            "columns": list(self.columns), "estimates": [e.to_dict() for e in self.estimates],
        }

    @classmethod
    def from_dict(cls, d) -> "CateTable":
        rows = []
        for r in d["estimates"]:
            r = dict(r)
            r["segment"] = tuple(r["segment"])
            rows.append(SegmentCateEstimate(**r))
        return cls(estimates=tuple(rows), alpha=d["alpha"], z=d["z"], columns=tuple(d["columns"]),
                   theta=d["theta"], correction=d["correction"])


def normal_ci(estimate: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    z = float(ndtri(1.0 - alpha / 2.0))
    return estimate - z * se, estimate + z * se


def one_sided_p(estimate: float, se: float, theta: float = 0.0) -> float:
    """P-value for H0: effect <= theta against H1: effect > theta."""
    if se == 0.0 or math.isinf(theta):
        diff = estimate - theta
        if diff > 0:
            return 0.0
        return 1.0
    return float(ndtr(-(estimate - theta) / se))


def estimate_cate_by_segment(D: PseudoOutcomes | np.ndarray, idx: SegmentIndex, alpha: float = 0.05,
                             min_size: int = SMALL_SEGMENT) -> CateTable:
    if not 0.0 < alpha < 1.0:
        raise ConfigError("alpha must lie in (0, 1)")
    if len(idx.segments) == 0:
        raise DegenerateError("empty segment index")
    d = D.D if isinstance(D, PseudoOutcomes) else np.asarray(D, dtype=float)
    if len(d) != len(idx.membership):
        raise ConfigError("pseudo-outcomes are not aligned with the segment index")
    z = float(ndtri(1.0 - alpha / 2.0))
    m = len(idx.segments)
    counts = np.bincount(idx.membership, minlength=m)
    sums = np.bincount(idx.membership, weights=d, minlength=m)
    means = sums / counts
    resid = d - means[idx.membership]
    ss = np.bincount(idx.membership, weights=resid * resid, minlength=m)
    n_total = counts.sum()

    rows, singletons = [], []
    for j, key in enumerate(idx.segments):
        n_v = int(counts[j])
        cate = float(means[j])
        flag = ""
        if n_v == 1:
            se = math.inf
            lo, hi = -math.inf, math.inf
            flag = FLAG_SINGLETON
            singletons.append(key)
        else:
            se = math.sqrt(ss[j] / (n_v - 1) / n_v)
            if se == 0.0:
                flag = FLAG_ZERO_VARIANCE
            lo, hi = cate - z * se, cate + z * se
        rows.append(SegmentCateEstimate(segment=tuple(key), n_v=n_v, proportion=float(n_v / n_total), cate=cate,
                                        se=se, ci_lower=lo, ci_upper=hi, flag=flag))
    if singletons:
        warnings.warn(f"{len(singletons)} segment(s) with a single unit are excluded from testing: {singletons}",
                      stacklevel=2)
    small = [key for key, c in zip(idx.segments, counts) if 1 < c < min_size]
    if small:
        warnings.warn(f"{len(small)} segment(s) have fewer than {min_size} units; their intervals are unreliable: "
                      f"{small}", stacklevel=2)
    return CateTable(estimates=tuple(rows), alpha=alpha, z=z, columns=tuple(idx.columns))


def adjust_pvalues(p: Sequence[float], correction: str = DEFAULT_CORRECTION) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    m = len(p)
    if correction == "none" or m == 0:
        return p.copy()
    if correction == "bonferroni":
        return np.minimum(1.0, m * p)
    if correction == "holm":
        order = np.argsort(p, kind="stable")
        scaled = np.minimum(1.0, (m - np.arange(m)) * p[order])
        adj = np.empty(m)
        adj[order] = np.maximum.accumulate(scaled)
        return adj
    raise ConfigError(f"unknown correction {correction!r}; expected one of {CORRECTIONS}")


def test_segments(table: CateTable, theta: float = 0.0, correction: str = DEFAULT_CORRECTION,
                  alpha: float | None = None) -> CateTable:
    """One-sided tests of CATE(v) <= theta with a multiplicity correction across testable segments."""
    if correction not in CORRECTIONS:
        raise ConfigError(f"unknown correction {correction!r}; expected one of {CORRECTIONS}")
    if math.isnan(theta):
        raise ConfigError("theta must be a number")
    alpha = table.alpha if alpha is None else alpha
    testable = [i for i, e in enumerate(table.estimates) if e.testable]
    if not testable:
        raise DegenerateError("no testable segments (every segment has a single unit)")
    raw = np.array([one_sided_p(table.estimates[i].cate, table.estimates[i].se, theta) for i in testable])
    adj = adjust_pvalues(raw, correction)
    rows = list(table.estimates)
    for i, e in enumerate(rows):
        if not e.testable:
            rows[i] = replace(e, p_raw=math.nan, p_adjusted=math.nan, treat=False)
    for i, pr, pa in zip(testable, raw, adj):
        rows[i] = replace(rows[i], p_raw=float(pr), p_adjusted=float(pa), treat=bool(pa < alpha))
    return replace(table, estimates=tuple(rows), theta=float(theta), correction=correction, alpha=alpha)


# pytest would otherwise collect the public name above as a test.
test_segments.__test__ = False


def fit_cate_function(D: PseudoOutcomes | np.ndarray, features, library: Sequence[LearnerSpec],
                      K: int = 5, seed: int | None = 0) -> FittedLearner:
    """Regress the pseudo-outcome on segmentation features with the discrete Super Learner."""
    return select_cate_function(D, features, library, K=K, seed=seed).model


def select_cate_function(D, features, library, K=5, seed=0) -> LibrarySelection:
    d = D.D if isinstance(D, PseudoOutcomes) else np.asarray(D, dtype=float)
    library = [s if s.loss == "squared-error" else replace(s, loss="squared-error") for s in library]
    return cv_select(library, features, d, K=K, seed=seed)


# -- presentation ------------------------------------------------------------

TABLE_HEADERS = ("Segment Proportion", "CATE", "Lower CL", "Upper CL", "Std. Err.", "p-value", "Treat?")


def _g6(x) -> str:
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return f"{x:.6g}"


def segment_label(table: CateTable, key) -> str:
    if table.columns:
        return ", ".join(f"{c}={v}" for c, v in zip(table.columns, key))
    return ", ".join(str(v) for v in key)


def _seg_headers(table: CateTable) -> list[str]:
    if table.columns:
        return list(table.columns)
    width = len(table.estimates[0].segment) if table.estimates else 0
    return [f"V{j + 1}" for j in range(width)]


def table_to_csv(table: CateTable) -> str:
    """Delimited table with the segment columns followed by the fixed summary columns.

    The ``p-value`` column carries the multiplicity-adjusted p-value that drives
    the ``Treat?`` decision.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*_seg_headers(table), *TABLE_HEADERS])
    for e in table.estimates:
        w.writerow([*e.segment, _g6(e.proportion), _g6(e.cate), _g6(e.ci_lower), _g6(e.ci_upper), _g6(e.se),
                    _g6(e.p_adjusted), "Yes" if e.treat else "No"])
    return buf.getvalue()


def plot_data_csv(table: CateTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "cate", "ci_lower", "ci_upper", "decision"])
    for e in table.estimates:
        w.writerow([segment_label(table, e.segment), _g6(e.cate), _g6(e.ci_lower), _g6(e.ci_upper),
                    "treat" if e.treat else "hold"])
    return buf.getvalue()


def format_table(table: CateTable) -> str:
    """Fixed-width text rendering, three decimals, p-values clamped to [0, 1]."""
    heads = [*_seg_headers(table), *TABLE_HEADERS]
    body = []
    for e in table.estimates:
        p = "NA" if math.isnan(e.p_adjusted) else f"{min(max(e.p_adjusted, 0.0), 1.0):.3f}"
        body.append([*map(str, e.segment), f"{e.proportion:.4f}", f"{e.cate:.3f}", f"{e.ci_lower:.3f}",
                     f"{e.ci_upper:.3f}", f"{e.se:.3f}", p, "Yes" if e.treat else "No"])
    widths = [max(len(h), *(len(r[j]) for r in body)) if body else len(h) for j, h in enumerate(heads)]
    lines = [" | ".join(h.rjust(wd) for h, wd in zip(heads, widths))]
    lines.append("-+-".join("-" * wd for wd in widths))
    lines += [" | ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in body]
    return "\n".join(lines)
