"""Population-level effects of a segment treatment rule.

Every estimate is the sample mean of per-unit influence contributions, with
standard error ``sd / sqrt(n)`` and a normal confidence interval.

* value:  E[Y(d)],  contribution ``1{A = d} / P(A|W) * (Y - q_A) + q_d``
* OTE:    E[Y(d)] - E[Y(a)] for a static arm ``a``
* HTE:    mean CATE inside the treat-set minus mean CATE outside it
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .cate import estimate_cate_by_segment
from .dataset import ExperimentDataset, FoldAssignment, SegmentIndex, build_segment_index, subset_index
from .exceptions import ConfigError, DegenerateError
from .nuisance import NuisanceEstimates, PseudoOutcomes, compute_pseudo_outcome
from .rules import RuleConfig, TreatmentRule

PLUG_IN = "plug-in-rule"
CROSS_VALIDATED = "cross-validated-rule"


@dataclass(frozen=True)
class RuleEffectEstimate:
    kind: str
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    n_used: int
    alpha: float = 0.05
    evaluation_mode: str = PLUG_IN
    static_arm: int | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "estimate": self.estimate, "se": self.se, "ci": [self.ci_lower, self.ci_upper],
            "alpha": self.alpha, "n_used": self.n_used, "evaluation_mode": self.evaluation_mode,
            "static_arm": self.static_arm, "rule_provenance": self.provenance,
        }

    @property
    def label(self) -> str:
        if self.kind == "ote":
            return f"OTE (rule vs static arm {self.static_arm})"
        return {"value": "Rule value", "hte": "HTE (T vs complement)"}.get(self.kind, self.kind)


def _summary(contrib: np.ndarray, alpha: float):
    n = len(contrib)
    psi = float(contrib.mean())
    se = float(contrib.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    z = float(ndtri(1.0 - alpha / 2.0))
    return psi, se, psi - z * se, psi + z * se


def _group_summary(D: np.ndarray, in_t: np.ndarray, alpha: float):
    n_t = int(in_t.sum())
    n_c = len(D) - n_t
    if n_t < 2 or n_c < 2:
        raise DegenerateError("HTE undefined; rule treats everyone or no one")
    d_t, d_c = D[in_t], D[~in_t]
    psi = float(d_t.mean() - d_c.mean())
    se = math.sqrt(d_t.var(ddof=1) / n_t + d_c.var(ddof=1) / n_c)
    z = float(ndtri(1.0 - alpha / 2.0))
    return psi, se, psi - z * se, psi + z * se


def value_contributions(decision, A, Y, nuis: NuisanceEstimates) -> np.ndarray:
    """Per-unit AIPW contributions to E[Y(d)] for per-unit decisions ``decision``."""
    decision = np.broadcast_to(np.asarray(decision), np.shape(A))
    A = np.asarray(A)
    follows = (A == decision).astype(float)
    return follows / nuis.prob_observed(A) * (np.asarray(Y) - nuis.q_at(A)) + nuis.q_at(decision)


def _index(data: ExperimentDataset, idx: SegmentIndex | None) -> SegmentIndex:
    return build_segment_index(data) if idx is None else idx


def _check(data, nuis):
    if nuis.n != data.n:
        raise ConfigError("nuisance estimates are not aligned with the dataset")


def estimate_value(rule: TreatmentRule, data: ExperimentDataset, nuis: NuisanceEstimates, alpha: float = 0.05,
                   idx: SegmentIndex | None = None) -> RuleEffectEstimate:
    _check(data, nuis)
    d = rule.decisions(_index(data, idx))
    psi, se, lo, hi = _summary(value_contributions(d, data.A, data.Y, nuis), alpha)
    return RuleEffectEstimate("value", psi, se, lo, hi, data.n, alpha, PLUG_IN, provenance=rule.provenance)


def estimate_ote(rule: TreatmentRule, static_arm: int, data: ExperimentDataset, nuis: NuisanceEstimates,
                 alpha: float = 0.05, idx: SegmentIndex | None = None) -> RuleEffectEstimate:
    """Contrast of the rule against always (1) or never (0) treating."""
    if static_arm not in (0, 1):
        raise ConfigError("static arm must be 0 or 1")
    _check(data, nuis)
    d = rule.decisions(_index(data, idx))
    contrib = value_contributions(d, data.A, data.Y, nuis) - value_contributions(static_arm, data.A, data.Y, nuis)
    psi, se, lo, hi = _summary(contrib, alpha)
    return RuleEffectEstimate("ote", psi, se, lo, hi, data.n, alpha, PLUG_IN, static_arm, rule.provenance)


def estimate_hte(rule: TreatmentRule, D: PseudoOutcomes | np.ndarray, idx: SegmentIndex,
                 alpha: float = 0.05) -> RuleEffectEstimate:
    d = D.D if isinstance(D, PseudoOutcomes) else np.asarray(D, dtype=float)
    in_t = rule.decisions(idx).astype(bool)
    psi, se, lo, hi = _group_summary(d, in_t, alpha)
    return RuleEffectEstimate("hte", psi, se, lo, hi, len(d), alpha, PLUG_IN, provenance=rule.provenance)


def learn_fold_rules(config: RuleConfig, D: np.ndarray, idx: SegmentIndex, folds: FoldAssignment,
                     alpha: float = 0.05) -> list[TreatmentRule]:
    """One rule per fold, each learned from the CATE table of the other folds' units."""
    rules = []
    for k in range(folds.K):
        tr = folds.training(k)
        sub = subset_index(idx, tr)
        table = estimate_cate_by_segment(D[tr], sub, alpha)
        if not any(e.testable for e in table.estimates):
            raise DegenerateError(f"training split for fold {k} has no testable segment")
        rules.append(config.learn(table))
    return rules


def estimate_cv_rule_value(config: RuleConfig, data: ExperimentDataset, folds: FoldAssignment,
                           nuis: NuisanceEstimates, kind: str = "value", static_arm: int = 1,
                           alpha: float = 0.05, idx: SegmentIndex | None = None,
                           pseudo: PseudoOutcomes | None = None,
                           fold_rules: list[TreatmentRule] | None = None) -> RuleEffectEstimate:
    """Evaluate a rule-learning procedure without reusing a unit for both learning and evaluation.

    Fold k's units are scored under the rule learned on the remaining folds.
    A segment unseen by a fold's training split is held (d = 0) for that fold.
    ``kind`` is one of ``value``, ``ote`` or ``hte``.  ``fold_rules`` may pass
    the output of :func:`learn_fold_rules` to avoid relearning.
    """
    if kind not in ("value", "ote", "hte"):
        raise ConfigError(f"unknown effect kind {kind!r}")
    if folds.K < 2:
        raise ConfigError("cross-validated rule evaluation needs K >= 2")
    _check(data, nuis)
    idx = _index(data, idx)
    D = (pseudo or compute_pseudo_outcome(data, nuis)).D
    rules = learn_fold_rules(config, D, idx, folds, alpha) if fold_rules is None else fold_rules
    d = np.empty(data.n, dtype=np.int8)
    for k, rule in enumerate(rules):
        va = folds.validation(k)
        d[va] = rule.decisions(idx, default=0)[va]
    prov = {"rule_config": _config_dict(config), "fold_treat_sets": [sorted(r.treat_set) for r in rules]}
    if kind == "hte":
        psi, se, lo, hi = _group_summary(D, d.astype(bool), alpha)
        return RuleEffectEstimate("hte", psi, se, lo, hi, data.n, alpha, CROSS_VALIDATED, provenance=prov)
    contrib = value_contributions(d, data.A, data.Y, nuis)
    if kind == "ote":
        contrib = contrib - value_contributions(static_arm, data.A, data.Y, nuis)
    psi, se, lo, hi = _summary(contrib, alpha)
    return RuleEffectEstimate(kind, psi, se, lo, hi, data.n, alpha, CROSS_VALIDATED,
                              static_arm if kind == "ote" else None, prov)


def _config_dict(config: RuleConfig) -> dict:
    d = {"mode": config.mode, "theta": config.theta, "alpha": config.alpha, "correction": config.correction,
         "require_significance": config.require_significance}
    if config.mode == "knapsack":
        d.update(budget=config.costs.budget, weighted=config.weighted, conservative=config.conservative)
    if config.mode == "static":
        d["static_arm"] = config.static_arm
    return d


def format_effects(estimates) -> str:
    rows = [("Effect", "Mode", "Estimate", "Std. Err.", "Lower CL", "Upper CL")]
    for e in estimates:
        rows.append((e.label, e.evaluation_mode, f"{e.estimate:.4f}", f"{e.se:.4f}", f"{e.ci_lower:.4f}",
                     f"{e.ci_upper:.4f}"))
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
