"""Seeded synthetic quasi-experiment with known ground truth.

Units have ``num_devices`` (1..5) and ``is_p2plus`` (0/1) as segmentation
covariates, plus ``is_newmarket`` and two zero-inflated, bounded non-negative
covariates ``baseline_ltv`` and ``baseline_viewing``.  Treatment is confounded
through a logistic model in the covariates; the outcome is

    Y = mu0(W) + A * tau(v) + sigma * eps

with ``mu0`` linear in W and ``tau`` a per-segment effect.  Because the effect
depends on W only through the segment, every truth below is exact.

With the default ``tau`` (bilinear in num_devices and is_p2plus) the outcome
regression is linear within each arm once pairwise interactions are included,
and the propensity is exactly logistic-linear: the correctly specified
learners are ``linear(interactions=True)`` fitted per arm, and ``logistic``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .dataset import ColumnRoles, ExperimentDataset, from_frame
from .exceptions import ConfigError
from .rules import TreatmentRule

COLUMNS = ("num_devices", "is_p2plus", "is_newmarket", "baseline_ltv", "baseline_viewing", "treatment",
           "outcome_viewing")
SEGMENT_COLUMNS = ("num_devices", "is_p2plus")
ADJUSTMENT_COLUMNS = ("num_devices", "is_p2plus", "is_newmarket", "baseline_ltv", "baseline_viewing")
DEFAULT_ROLES = ColumnRoles(outcome_col="outcome_viewing", treatment_col="treatment",
                            adjustment_cols=ADJUSTMENT_COLUMNS, segmentation_cols=SEGMENT_COLUMNS)

PROPENSITY_FLOOR = 0.05

_PROPORTIONS = (0.0392, 0.0862, 0.0718, 0.1752, 0.0764, 0.1796, 0.0728, 0.1814, 0.0328, 0.0846)
DEFAULT_SEGMENT_PROBS = {(nd, p2): p for (nd, p2), p in
                         zip([(nd, p2) for nd in range(1, 6) for p2 in (0, 1)], _PROPORTIONS)}


def default_tau(num_devices: int, is_p2plus: int) -> float:
    if is_p2plus:
        return 4.5 - 1.8 * (num_devices - 1)
    return -1.5 + 1.3 * (num_devices - 1)


# Scaled Beta laws keep the continuous covariates in [0, 3].
LTV_BETA = (2.0, 3.0)
VIEWING_BETA = (2.0, 2.0)
COVARIATE_MAX = 3.0


@dataclass(frozen=True, eq=False)
class DgpSpec:
    n: int = 5000
    seed: int = 0
    segment_probs: Mapping[tuple, float] = field(default_factory=lambda: dict(DEFAULT_SEGMENT_PROBS))
    tau: Mapping[tuple, float] | None = None
    p_newmarket: float = 0.3
    ltv_zero_prob: float = 0.4
    viewing_zero_prob: float = 0.5
    propensity_coef: Mapping[str, float] = field(default_factory=lambda: {
        "intercept": -0.6, "num_devices": 0.25, "is_p2plus": 0.2, "is_newmarket": -0.3,
        "baseline_ltv": 0.5, "baseline_viewing": 0.4})
    outcome_coef: Mapping[str, float] = field(default_factory=lambda: {
        "intercept": 1.0, "num_devices": 0.3, "is_p2plus": 0.5, "is_newmarket": -0.4,
        "baseline_ltv": 1.0, "baseline_viewing": 0.8})
    sigma: float = 1.0
    randomized_prob: float | None = None

    def __post_init__(self):
        probs = {tuple(int(x) for x in k): float(v) for k, v in dict(self.segment_probs).items()}
        if not probs or any(p <= 0 for p in probs.values()):
            raise ConfigError("segment probabilities must be positive")
        total = sum(probs.values())
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"segment probabilities sum to {total}, expected 1")
        for nd, p2 in probs:
            if nd < 1 or p2 not in (0, 1):
                raise ConfigError(f"invalid segment {(nd, p2)}: num_devices >= 1, is_p2plus in {{0, 1}}")
        object.__setattr__(self, "segment_probs", {k: probs[k] / total for k in sorted(probs)})
        tau = {} if self.tau is None else {tuple(int(x) for x in k): float(v) for k, v in dict(self.tau).items()}
        object.__setattr__(self, "tau", {k: tau.get(k, default_tau(*k)) for k in self.segment_probs})
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        for name in ("p_newmarket", "ltv_zero_prob", "viewing_zero_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.randomized_prob is not None and not PROPENSITY_FLOOR <= self.randomized_prob <= 1 - PROPENSITY_FLOOR:
            raise ConfigError("randomized_prob must lie in [0.05, 0.95]")
        for coef, what in ((self.propensity_coef, "propensity"), (self.outcome_coef, "outcome")):
            unknown = set(coef) - {"intercept", *ADJUSTMENT_COLUMNS}
            if unknown:
                raise ConfigError(f"unknown {what} coefficient(s): {sorted(unknown)}")
        object.__setattr__(self, "propensity_coef", dict(self.propensity_coef))
        object.__setattr__(self, "outcome_coef", dict(self.outcome_coef))

    @property
    def segments(self) -> tuple:
        return tuple(self.segment_probs)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["segment_probs"] = [[*k, v] for k, v in self.segment_probs.items()]
        d["tau"] = [[*k, v] for k, v in self.tau.items()]
        return d

    @classmethod
    def from_dict(cls, d) -> "DgpSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown simulation key(s): {sorted(unknown)}")
        for key in ("segment_probs", "tau"):
            if isinstance(d.get(key), list):
                d[key] = {(int(r[0]), int(r[1])): float(r[2]) for r in d[key]}
        return cls(**d)


def _linear(coef: Mapping[str, float], cov: Mapping[str, np.ndarray]) -> np.ndarray:
    out = np.full(len(cov["num_devices"]), coef.get("intercept", 0.0))
    for name in ADJUSTMENT_COLUMNS:
        out = out + coef.get(name, 0.0) * cov[name]
    return out


def true_propensity(spec: DgpSpec, cov: Mapping[str, np.ndarray]) -> np.ndarray:
    if spec.randomized_prob is not None:
        return np.full(len(cov["num_devices"]), spec.randomized_prob)
    lin = _linear(spec.propensity_coef, {**cov, "num_devices": cov["num_devices"] - 3.0})
    return np.clip(1.0 / (1.0 + np.exp(-lin)), PROPENSITY_FLOOR, 1.0 - PROPENSITY_FLOOR)


def _zero_inflated(rng, n, zero_prob, beta) -> np.ndarray:
    value = COVARIATE_MAX * rng.beta(*beta, size=n)
    return np.where(rng.random(n) < zero_prob, 0.0, value)


def draw_covariates(spec: DgpSpec, n: int, rng: np.random.Generator) -> dict:
    keys = spec.segments
    probs = np.array([spec.segment_probs[k] for k in keys])
    seg = rng.choice(len(keys), size=n, p=probs)
    nd = np.array([k[0] for k in keys])[seg]
    p2 = np.array([k[1] for k in keys])[seg]
    return {
        "segment": seg,
        "num_devices": nd.astype(float),
        "is_p2plus": p2.astype(float),
        "is_newmarket": (rng.random(n) < spec.p_newmarket).astype(float),
        "baseline_ltv": _zero_inflated(rng, n, spec.ltv_zero_prob, LTV_BETA),
        "baseline_viewing": _zero_inflated(rng, n, spec.viewing_zero_prob, VIEWING_BETA),
    }


def generate_frame(spec: DgpSpec) -> pd.DataFrame:
    rng = np.random.default_rng(spec.seed)
    cov = draw_covariates(spec, spec.n, rng)
    g = true_propensity(spec, cov)
    A = (rng.random(spec.n) < g).astype(int)
    tau = np.array([spec.tau[k] for k in spec.segments])[cov["segment"]]
    Y = _linear(spec.outcome_coef, cov) + A * tau + spec.sigma * rng.standard_normal(spec.n)
    return pd.DataFrame({
        "num_devices": cov["num_devices"].astype(int),
        "is_p2plus": cov["is_p2plus"].astype(int),
        "is_newmarket": cov["is_newmarket"].astype(int),
        "baseline_ltv": cov["baseline_ltv"],
        "baseline_viewing": cov["baseline_viewing"],
        "treatment": A,
        "outcome_viewing": Y,
    }, columns=list(COLUMNS))


def generate(spec: DgpSpec | None = None, roles: ColumnRoles = DEFAULT_ROLES) -> ExperimentDataset:
    return from_frame(generate_frame(spec or DgpSpec()), roles)


def to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, lineterminator="\n")


# -- oracle ----------------------------------------------------------------

@dataclass(frozen=True)
class OracleTruth:
    proportions: dict
    true_cate: dict
    control_mean: dict
    method: str = "exact"
    mc_se: dict = field(default_factory=dict)
    rule_truths: tuple = ()

    @property
    def true_ate(self) -> float:
        return math.fsum(self.proportions[v] * self.true_cate[v] for v in self.proportions)

    def value(self, rule: TreatmentRule) -> float:
        return math.fsum(p * (self.control_mean[v] + rule.d(v) * self.true_cate[v])
                         for v, p in self.proportions.items())

    def ote(self, rule: TreatmentRule, static_arm: int = 1) -> float:
        return math.fsum(p * (rule.d(v) - static_arm) * self.true_cate[v] for v, p in self.proportions.items())

    def hte(self, rule: TreatmentRule) -> float:
        in_t = [v for v in self.proportions if rule.d(v)]
        out_t = [v for v in self.proportions if not rule.d(v)]
        if not in_t or not out_t:
            return math.nan
        def cond_mean(vs):
            mass = math.fsum(self.proportions[v] for v in vs)
            return math.fsum(self.proportions[v] * self.true_cate[v] for v in vs) / mass
        return cond_mean(in_t) - cond_mean(out_t)

    def optimal_rule(self, theta: float = 0.0) -> TreatmentRule:
        segs = tuple(self.proportions)
        return TreatmentRule(treat_set=frozenset(v for v in segs if self.true_cate[v] > theta), segments=segs,
                             provenance={"kind": "oracle", "theta": theta})

    def to_dict(self) -> dict:
        rows = [{"segment": list(v), "proportion": self.proportions[v], "true_cate": self.true_cate[v],
                 "control_mean": self.control_mean[v], **({"mc_se": self.mc_se[v]} if v in self.mc_se else {})}
                for v in self.proportions]
        return {"method": self.method, "true_ate": self.true_ate, "segments": rows,
                "rules": list(self.rule_truths)}


def _rule_truths(truth: OracleTruth, rules: Sequence[TreatmentRule]) -> tuple:
    out = []
    for r in rules:
        out.append({"treat": sorted(list(v) for v in r.treat_set), "value": truth.value(r),
                    "ote_vs_1": truth.ote(r, 1), "ote_vs_0": truth.ote(r, 0), "hte": truth.hte(r)})
    return tuple(out)


def oracle_truth(spec: DgpSpec, rules: Sequence[TreatmentRule] = ()) -> OracleTruth:
    """Exact truths by enumerating segments; continuous covariates enter through their means."""
    b = spec.outcome_coef
    mean_ltv = (1 - spec.ltv_zero_prob) * COVARIATE_MAX * LTV_BETA[0] / sum(LTV_BETA)
    mean_view = (1 - spec.viewing_zero_prob) * COVARIATE_MAX * VIEWING_BETA[0] / sum(VIEWING_BETA)
    control = {}
    for nd, p2 in spec.segments:
        control[(nd, p2)] = (b.get("intercept", 0.0) + b.get("num_devices", 0.0) * nd + b.get("is_p2plus", 0.0) * p2
                             + b.get("is_newmarket", 0.0) * spec.p_newmarket + b.get("baseline_ltv", 0.0) * mean_ltv
                             + b.get("baseline_viewing", 0.0) * mean_view)
    truth = OracleTruth(proportions=dict(spec.segment_probs), true_cate=dict(spec.tau), control_mean=control)
    return OracleTruth(truth.proportions, truth.true_cate, truth.control_mean, "exact", {},
                       _rule_truths(truth, rules))


def monte_carlo_truth(spec: DgpSpec, rules: Sequence[TreatmentRule] = (), n: int = 1_000_000,
                      seed: int = 12345) -> OracleTruth:
    """Truths from n draws of the potential outcomes; ``mc_se`` holds per-segment standard errors."""
    rng = np.random.default_rng(seed)
    cov = draw_covariates(spec, n, rng)
    tau = np.array([spec.tau[k] for k in spec.segments])[cov["segment"]]
    eps = spec.sigma * rng.standard_normal(n)
    y0 = _linear(spec.outcome_coef, cov) + eps
    y1 = y0 + tau
    props, cate, control, se = {}, {}, {}, {}
    for j, v in enumerate(spec.segments):
        m = cov["segment"] == j
        props[v] = spec.segment_probs[v]
        diff = y1[m] - y0[m]
        cate[v] = float(diff.mean())
        control[v] = float(y0[m].mean())
        se[v] = float(max(diff.std(ddof=1), y0[m].std(ddof=1)) / math.sqrt(m.sum()))
    truth = OracleTruth(props, cate, control, "monte-carlo", se)
    return OracleTruth(props, cate, control, "monte-carlo", se, _rule_truths(truth, rules))
