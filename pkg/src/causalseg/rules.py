"""Treatment rules over segments: thresholding, budgeted knapsack selection, static arms.

A rule is the treat-set ``T``; its decision function is ``d(v) = 1{v in T}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .cate import DEFAULT_CORRECTION, CateTable, test_segments
from .dataset import SegmentIndex
from .exceptions import ConfigError

EXHAUSTIVE_LIMIT = 20
DP_STEPS = 10_000
# Vectorized subset sums are re-checked with exact summation inside this band.
_RECHECK = 1e-9


@dataclass(frozen=True)
class CostSpec:
    cost: Mapping[tuple, float]
    budget: float

    def __post_init__(self):
        object.__setattr__(self, "cost", {tuple(k): float(v) for k, v in dict(self.cost).items()})
        if not (math.isfinite(self.budget) and self.budget >= 0):
            raise ConfigError(f"budget must be finite and >= 0, got {self.budget}")
        for k, c in self.cost.items():
            if not (math.isfinite(c) and c >= 0):
                raise ConfigError(f"cost for segment {k} must be finite and >= 0, got {c}")

    def of(self, key) -> float:
        try:
            return self.cost[tuple(key)]
        except KeyError:
            raise ConfigError(f"no cost given for segment {tuple(key)}") from None


@dataclass(frozen=True)
class TreatmentRule:
    treat_set: frozenset
    segments: tuple
    provenance: dict = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "treat_set", frozenset(tuple(k) for k in self.treat_set))
        object.__setattr__(self, "segments", tuple(tuple(k) for k in self.segments))
        unknown = self.treat_set - set(self.segments)
        if unknown:
            raise ConfigError(f"treat set contains unknown segments: {sorted(unknown)}")

    def d(self, key) -> int:
        key = tuple(key)
        if key in self.treat_set:
            return 1
        if key in self._domain:
            return 0
        raise KeyError(key)

    @property
    def _domain(self) -> frozenset:
        dom = self.__dict__.get("_domain_cache")
        if dom is None:
            dom = frozenset(self.segments)
            object.__setattr__(self, "_domain_cache", dom)
        return dom

    def decisions(self, idx: SegmentIndex, default: int | None = None) -> np.ndarray:
        """Per-unit d(V_i).  Segments outside the rule's domain raise unless ``default`` is set."""
        per_segment = np.empty(len(idx.segments), dtype=np.int8)
        for j, key in enumerate(idx.segments):
            try:
                per_segment[j] = self.d(key)
            except KeyError:
                if default is None:
                    raise ConfigError(f"rule is undefined on segment {key}") from None
                per_segment[j] = default
        return per_segment[idx.membership]

    @property
    def d_map(self) -> dict:
        return {k: self.d(k) for k in self.segments}

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "segments": [list(k) for k in self.segments],
            "treat": [list(k) for k in self.segments if k in self.treat_set],
            "d": [[*k, self.d(k)] for k in self.segments],
        }

    @classmethod
    def from_dict(cls, d) -> "TreatmentRule":
        return cls(treat_set=frozenset(tuple(k) for k in d["treat"]),
                   segments=tuple(tuple(k) for k in d["segments"]), provenance=d.get("provenance", {}))


@dataclass(frozen=True)
class KnapsackSolution:
    chosen: tuple
    objective: float
    spend: float
    solver: str
    optimal: bool
    budget: float

    def to_dict(self) -> dict:
        return {"chosen": [list(k) for k in self.chosen], "objective": self.objective, "spend": self.spend,
                "solver": self.solver, "certified_optimal": self.optimal, "budget": self.budget}


def threshold_rule(table: CateTable, theta: float = 0.0, alpha: float | None = None,
                   require_significance: bool = True, correction: str | None = None) -> TreatmentRule:
    """Treat segments whose CATE exceeds ``theta``.

    With ``require_significance`` a segment is treated when the corrected
    one-sided p-value is below ``alpha``; otherwise the point estimate decides.
    Single-unit segments are never treated.
    """
    alpha = table.alpha if alpha is None else alpha
    if require_significance:
        correction = correction or table.correction or DEFAULT_CORRECTION
        tested = test_segments(table, theta, correction, alpha)
        chosen = [e.segment for e in tested.estimates if e.treat]
        prov = {"kind": "threshold", "theta": theta, "alpha": alpha, "correction": correction,
                "require_significance": True}
    else:
        chosen = [e.segment for e in table.estimates if e.testable and e.cate > theta]
        prov = {"kind": "threshold", "theta": theta, "require_significance": False}
    return TreatmentRule(treat_set=frozenset(chosen), segments=table.segments, provenance=prov)


def static_rule(arm: int, idx: SegmentIndex | CateTable) -> TreatmentRule:
    if arm not in (0, 1):
        raise ConfigError(f"static arm must be 0 or 1, got {arm}")
    segments = idx.segments
    return TreatmentRule(treat_set=frozenset(segments) if arm == 1 else frozenset(), segments=segments,
                         provenance={"kind": "static", "arm": arm})


# -- knapsack ----------------------------------------------------------------

def _subset_sums(x: np.ndarray) -> np.ndarray:
    # Entry i is the sum over items whose bit is set in i.
    sums = np.zeros(1)
    for v in x:
        sums = np.concatenate([sums, sums + v])
    return sums


def _mask(i: int, m: int) -> np.ndarray:
    return ((i >> np.arange(m)) & 1).astype(bool)


def _exhaustive(benefit: np.ndarray, weight: np.ndarray, budget: float) -> np.ndarray:
    m = len(benefit)
    value = _subset_sums(benefit)
    spend = _subset_sums(weight)
    tol = _RECHECK * max(1.0, budget, float(weight.sum()))
    feasible = spend <= budget - tol
    for i in np.flatnonzero(np.abs(spend - budget) <= tol):
        feasible[i] = math.fsum(weight[_mask(i, m)]) <= budget
    cand = np.flatnonzero(feasible)
    best = value[cand].max()
    vtol = _RECHECK * max(1.0, float(np.abs(benefit).sum()))
    scored = []
    for i in cand[value[cand] >= best - vtol]:
        mk = _mask(i, m)
        # Exact objective, then lower spend, then lexicographically earliest subset.
        scored.append((-math.fsum(benefit[mk]), math.fsum(weight[mk]), tuple(np.flatnonzero(mk)), i))
    return _mask(min(scored)[3], m)


def _dynamic_program(benefit: np.ndarray, weight: np.ndarray, budget: float, resolution: float) -> np.ndarray:
    m = len(benefit)
    # Rounding weights up keeps every DP-feasible set feasible in real units.
    w_int = np.ceil(weight / resolution).astype(np.int64)
    cap = int(math.floor(budget / resolution))
    best = np.zeros(cap + 1)
    take = np.zeros((m, cap + 1), dtype=bool)
    for j in range(m):
        wj = w_int[j]
        if wj > cap:
            continue
        cand = best[: cap + 1 - wj] + benefit[j]
        better = cand > best[wj:]
        take[j, wj:] = better
        best[wj:] = np.where(better, cand, best[wj:])
    chosen = np.zeros(m, dtype=bool)
    c = int(np.argmax(best))
    for j in range(m - 1, -1, -1):
        if take[j, c]:
            chosen[j] = True
            c -= w_int[j]
    # Guard against float rounding in the discretization.
    while math.fsum(weight[chosen]) > budget:
        picked = np.flatnonzero(chosen)
        chosen[picked[np.argmin(benefit[picked] / weight[picked])]] = False
    return chosen


def solve_knapsack(benefit, weight, budget: float, resolution: float | None = None,
                   exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> tuple[np.ndarray, str, bool]:
    """Binary knapsack over items with positive benefit and non-negative weight.

    Zero-weight items are always taken.  Returns (mask, solver, certified_optimal).
    """
    benefit = np.asarray(benefit, dtype=float)
    weight = np.asarray(weight, dtype=float)
    mask = weight == 0
    rest = np.flatnonzero(~mask)
    if len(rest) == 0:
        return mask, "exhaustive", True
    if len(rest) <= exhaustive_limit:
        mask[rest] = _exhaustive(benefit[rest], weight[rest], budget)
        return mask, "exhaustive", True
    if budget == 0:
        return mask, "dynamic-program", True
    resolution = budget / DP_STEPS if resolution is None else resolution
    if not resolution > 0:
        raise ConfigError("knapsack resolution must be > 0")
    mask[rest] = _dynamic_program(benefit[rest], weight[rest], budget, resolution)
    return mask, "dynamic-program", False


def knapsack_rule(table: CateTable, costs: CostSpec, *, weighted: bool = True, conservative: bool = False,
                  require_significance: bool = False, resolution: float | None = None,
                  exhaustive_limit: int = EXHAUSTIVE_LIMIT) -> tuple[TreatmentRule, KnapsackSolution]:
    """Choose positive-effect segments maximizing sum cate(v) p(v) under sum cost(v) p(v) <= budget.

    ``weighted=False`` drops p(v) from the objective (the constraint keeps it).
    ``conservative`` ranks by the lower confidence limit instead of the estimate.
    ``require_significance`` also requires a completed table's treat decision.
    """
    if require_significance and not table.tested:
        raise ConfigError("require_significance needs a tested CATE table")
    cands = []
    for e in table.estimates:
        score = e.ci_lower if conservative else e.cate
        if not e.testable or not score > 0:
            continue
        if require_significance and not e.treat:
            continue
        cands.append(e)
    benefit = np.array([(e.ci_lower if conservative else e.cate) * (e.proportion if weighted else 1.0)
                        for e in cands])
    weight = np.array([costs.of(e.segment) * e.proportion for e in cands])
    if cands:
        mask, solver, optimal = solve_knapsack(benefit, weight, costs.budget, resolution, exhaustive_limit)
    else:
        mask, solver, optimal = np.zeros(0, dtype=bool), "exhaustive", True
    chosen = tuple(e.segment for e, take in zip(cands, mask) if take)
    sol = KnapsackSolution(chosen=chosen, objective=math.fsum(benefit[mask]), spend=math.fsum(weight[mask]),
                           solver=solver, optimal=optimal, budget=costs.budget)
    prov = {"kind": "knapsack", "budget": costs.budget, "weighted": weighted, "conservative": conservative,
            "require_significance": require_significance, "solver": solver, "certified_optimal": optimal}
    rule = TreatmentRule(treat_set=frozenset(chosen), segments=table.segments, provenance=prov)
    return rule, sol


@dataclass(frozen=True)
class RuleConfig:
    """How to learn a rule from a CATE table; used for cross-validated rule evaluation."""

    mode: str = "threshold"
    theta: float = 0.0
    alpha: float = 0.05
    correction: str = DEFAULT_CORRECTION
    require_significance: bool | None = None
    costs: CostSpec | None = None
    weighted: bool = True
    conservative: bool = False
    static_arm: int = 1

    def __post_init__(self):
        if self.mode not in ("threshold", "knapsack", "static"):
            raise ConfigError(f"unknown rule mode {self.mode!r}")
        if self.mode == "knapsack" and self.costs is None:
            raise ConfigError("knapsack rule mode requires a cost specification")
        if self.require_significance is None:
            # Thresholding tests by default; knapsack candidacy uses point estimates.
            object.__setattr__(self, "require_significance", self.mode == "threshold")

    def learn(self, table: CateTable) -> TreatmentRule:
        if self.mode == "static":
            return static_rule(self.static_arm, table)
        if self.mode == "threshold":
            return threshold_rule(table, self.theta, self.alpha, self.require_significance, self.correction)
        if self.require_significance and not table.tested:
            table = test_segments(table, self.theta, self.correction, self.alpha)
        return knapsack_rule(table, self.costs, weighted=self.weighted, conservative=self.conservative,
                             require_significance=self.require_significance)[0]
