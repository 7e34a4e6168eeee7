"""Experiment data: column roles, validation, segment enumeration, and fold assignment.

Units carry baseline covariates ``W``, a binary treatment ``A``, an outcome
``Y`` and discrete segmentation covariates ``V``.  A segment is one observed
realization of ``V``.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .exceptions import ConfigError, DataError

SegmentKey = tuple


@dataclass(frozen=True)
class ColumnRoles:
    outcome_col: str
    treatment_col: str
    adjustment_cols: tuple[str, ...] = ()
    segmentation_cols: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "adjustment_cols", tuple(self.adjustment_cols))
        object.__setattr__(self, "segmentation_cols", tuple(self.segmentation_cols))
        if self.outcome_col == self.treatment_col:
            raise ConfigError("outcome and treatment must be different columns")
        for col in (self.outcome_col, self.treatment_col):
            if col in self.adjustment_cols or col in self.segmentation_cols:
                raise ConfigError(f"column {col!r} cannot be both a response/treatment and a covariate")
        if not self.segmentation_cols:
            raise ConfigError("at least one segmentation column is required")
        for cols, what in ((self.adjustment_cols, "adjustment"), (self.segmentation_cols, "segmentation")):
            if len(set(cols)) != len(cols):
                raise ConfigError(f"duplicate {what} column")

    @property
    def all_columns(self) -> list[str]:
        seen = dict.fromkeys([self.outcome_col, self.treatment_col, *self.adjustment_cols, *self.segmentation_cols])
        return list(seen)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome_col,
            "treatment": self.treatment_col,
            "adjustment": list(self.adjustment_cols),
            "segmentation": list(self.segmentation_cols),
        }

    @classmethod
    def from_dict(cls, d) -> "ColumnRoles":
        try:
            return cls(
                outcome_col=d["outcome"],
                treatment_col=d["treatment"],
                adjustment_cols=tuple(d.get("adjustment", ())),
                segmentation_cols=tuple(d.get("segmentation", ())),
            )
        except KeyError as exc:
            raise ConfigError(f"roles missing key {exc}") from None


@dataclass(frozen=True, eq=False)
class ExperimentDataset:
    """Validated unit-level data.

    ``W`` is a float design matrix: numeric columns as-is, categorical columns
    expanded to indicator columns (first level dropped).  ``V`` holds the
    segmentation covariates as float codes (numeric values, or first-appearance
    level codes for categoricals); ``segment_keys`` holds the same values as
    plain Python tuples.
    """

    roles: ColumnRoles
    A: np.ndarray
    Y: np.ndarray
    W: np.ndarray
    w_names: tuple[str, ...]
    V: np.ndarray
    segment_keys: tuple[SegmentKey, ...]
    levels: dict = field(default_factory=dict)
    fingerprint: str | None = None

    @property
    def n(self) -> int:
        return len(self.Y)


@dataclass(frozen=True, eq=False)
class SegmentIndex:
    segments: tuple[SegmentKey, ...]
    membership: np.ndarray
    counts: np.ndarray
    columns: tuple[str, ...] = ()

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def position(self, key) -> int:
        return self._lookup[tuple(key)]

    @property
    def _lookup(self) -> dict:
        cache = self.__dict__.get("_lookup_cache")
        if cache is None:
            cache = {k: i for i, k in enumerate(self.segments)}
            object.__setattr__(self, "_lookup_cache", cache)
        return cache

    def units_in(self, key) -> np.ndarray:
        return np.flatnonzero(self.membership == self.position(key))


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    K: int
    fold_of: np.ndarray
    seed: int | None

    def validation(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def training(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.K)


def _native(value):
    if isinstance(value, np.generic):
        return value.item()
    return value


def file_fingerprint(path) -> str:
    """SHA-256 of the file bytes with line endings normalized."""
    with open(path, "rb") as fh:
        raw = fh.read()
    raw = raw.replace(b"\r\n", b"\n").rstrip(b"\n")
    return hashlib.sha256(raw).hexdigest()


def _sniff_sep(path) -> str:
    if str(path).lower().endswith((".tsv", ".tab")):
        return "\t"
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
    return "\t" if "\t" in header and "," not in header else ","


def load_dataset(source, roles: ColumnRoles, sep: str | None = None) -> ExperimentDataset:
    """Read a delimited text file with a header row and validate it against ``roles``."""
    if not os.path.exists(source):
        raise DataError(f"data file not found: {source}")
    if sep is None:
        sep = _sniff_sep(source)
    try:
        frame = pd.read_csv(source, sep=sep, encoding="utf-8", thousands=None, decimal=".")
    except pd.errors.EmptyDataError:
        raise DataError(f"empty file: {source}") from None
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {source}: {exc}") from None
    return from_frame(frame, roles, fingerprint=file_fingerprint(source))


def _is_numeric(series: pd.Series) -> bool:
    return pd.api.types.is_numeric_dtype(series) and not pd.api.types.is_bool_dtype(series)


def from_frame(frame: pd.DataFrame, roles: ColumnRoles, fingerprint: str | None = None) -> ExperimentDataset:
    missing = [c for c in roles.all_columns if c not in frame.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    if len(frame) == 0:
        raise DataError("empty file: no data rows")
    sub = frame[roles.all_columns]
    if sub.isna().any().any():
        bad = [c for c in sub.columns if sub[c].isna().any()]
        raise DataError(f"missing values in column(s): {', '.join(bad)}")

    a_raw = pd.to_numeric(frame[roles.treatment_col], errors="coerce")
    if a_raw.isna().any() or not a_raw.isin([0, 1]).all():
        raise DataError(f"non-binary treatment in column {roles.treatment_col!r}")
    A = a_raw.to_numpy().astype(np.int8)

    if not _is_numeric(frame[roles.outcome_col]):
        raise DataError(f"non-numeric outcome in column {roles.outcome_col!r}")
    Y = frame[roles.outcome_col].to_numpy(dtype=float)
    if not np.all(np.isfinite(Y)):
        raise DataError(f"non-finite outcome in column {roles.outcome_col!r}")

    levels: dict[str, list] = {}
    w_cols, w_names = [], []
    for col in roles.adjustment_cols:
        s = frame[col]
        if _is_numeric(s):
            x = s.to_numpy(dtype=float)
            if not np.all(np.isfinite(x)):
                raise DataError(f"non-finite values in column {col!r}")
            w_cols.append(x)
            w_names.append(col)
        else:
            codes, uniques = pd.factorize(s, sort=False)
            levels[col] = [_native(u) for u in uniques]
            for j, lev in enumerate(levels[col][1:], start=1):
                w_cols.append((codes == j).astype(float))
                w_names.append(f"{col}={lev}")
    W = np.column_stack(w_cols) if w_cols else np.empty((len(Y), 0))

    v_cols, v_values = [], []
    for col in roles.segmentation_cols:
        s = frame[col]
        if _is_numeric(s):
            if not np.all(np.isfinite(s.to_numpy(dtype=float))):
                raise DataError(f"non-finite values in column {col!r}")
            v_cols.append(s.to_numpy(dtype=float))
            v_values.append(s.tolist())
        else:
            codes, uniques = pd.factorize(s, sort=False)
            levels[col] = [_native(u) for u in uniques]
            v_cols.append(codes.astype(float))
            v_values.append([_native(x) for x in s.tolist()])
    V = np.column_stack(v_cols)
    keys = tuple(zip(*v_values))

    return ExperimentDataset(
        roles=roles, A=A, Y=Y, W=W, w_names=tuple(w_names), V=V,
        segment_keys=keys, levels=levels, fingerprint=fingerprint,
    )


def build_segment_index(data: ExperimentDataset | Sequence[SegmentKey]) -> SegmentIndex:
    """Enumerate the observed support of ``V``; segments are sorted by key."""
    if isinstance(data, ExperimentDataset):
        keys, columns = data.segment_keys, data.roles.segmentation_cols
    else:
        keys, columns = tuple(tuple(k) for k in data), ()
    if not keys:
        raise DataError("no units to segment")
    codes, uniques = pd.factorize(pd.Series(list(keys), dtype=object), sort=False)
    uniques = [tuple(u) for u in uniques]
    order = sorted(range(len(uniques)), key=lambda j: uniques[j])
    remap = np.empty(len(order), dtype=np.intp)
    remap[order] = np.arange(len(order))
    membership = remap[codes]
    counts = np.bincount(membership, minlength=len(order))
    return SegmentIndex(
        segments=tuple(uniques[j] for j in order),
        membership=membership,
        counts=counts,
        columns=tuple(columns),
    )


def partition_folds(n: int, K: int, seed: int | None = None, strata: Iterable | None = None) -> FoldAssignment:
    """Shuffle units into ``K`` folds whose sizes differ by at most one.

    When ``strata`` is given (e.g. the treatment vector) each stratum is dealt
    evenly across folds as well.
    """
    if K < 2 or K > n:
        raise ConfigError(f"fold count K={K} must satisfy 2 <= K <= n={n}")
    rng = np.random.default_rng(seed)
    if strata is None:
        order = rng.permutation(n)
    else:
        strata = np.asarray(strata)
        if len(strata) != n:
            raise ConfigError("strata length does not match n")
        order = np.concatenate([rng.permutation(np.flatnonzero(strata == s)) for s in np.unique(strata)])
    fold_of = np.empty(n, dtype=np.intp)
    fold_of[order] = np.arange(n) % K
    return FoldAssignment(K=K, fold_of=fold_of, seed=seed)


def subset_index(idx: SegmentIndex, rows) -> SegmentIndex:
    """Segment index restricted to ``rows``; segments absent from ``rows`` are dropped."""
    member = idx.membership[rows]
    present = np.unique(member)
    remap = np.full(len(idx.segments), -1, dtype=np.intp)
    remap[present] = np.arange(len(present))
    membership = remap[member]
    return SegmentIndex(
        segments=tuple(idx.segments[j] for j in present),
        membership=membership,
        counts=np.bincount(membership, minlength=len(present)),
        columns=idx.columns,
    )
