"""Command-line pipeline: simulate, calculate, segment, assess.

``calculate`` fits all nuisance models once and caches them; ``segment`` and
``assess`` only read that cache.

Exit status: 0 success, 1 configuration error, 2 data error, 3 statistical
degeneracy, 4 stale or missing cache.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import pandas as pd
import yaml

from . import _io, simgen
from .cate import (CORRECTIONS, CateTable, estimate_cate_by_segment, format_table, plot_data_csv,
                   select_cate_function, table_to_csv, test_segments)
from .dataset import (ColumnRoles, FoldAssignment, build_segment_index, file_fingerprint, load_dataset,
                      partition_folds)
from .effects import (CROSS_VALIDATED, PLUG_IN, estimate_cv_rule_value, estimate_hte, estimate_ote,
                      estimate_value, format_effects, learn_fold_rules)
from .exceptions import ConfigError, DataError, DegenerateError, LearnerError, StaleCacheError
from .learners import LearnerSpec
from .nuisance import (DEFAULT_EPSILON, DEFAULT_K, TruncationPolicy, compute_pseudo_outcome,
                       cross_fit_nuisance, load_cache, save_cache)
from .rules import CostSpec, RuleConfig, TreatmentRule, knapsack_rule, threshold_rule

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DEGENERATE, EXIT_STALE = 0, 1, 2, 3, 4

CACHE_FILE = "nuisance_cache.json"
CATE_CSV, CATE_JSON, PLOT_CSV = "cate_table.csv", "cate_table.json", "cate_plot.csv"
RULE_JSON, SEGMENT_CSV, SEGMENT_JSON = "rule.json", "segment_table.csv", "segment_table.json"
EFFECTS_JSON, EFFECTS_TXT = "effects.json", "effects.txt"
SIM_DATA, TRUTH_JSON = "simulated.csv", "truth.json"

DEFAULT_LIBRARIES = {
    "propensity": [{"kind": "mean"}, {"kind": "logistic"}],
    "outcome": [{"kind": "mean"}, {"kind": "linear"}, {"kind": "linear", "interactions": True},
                {"kind": "knn", "k": 20}],
    "cate": [{"kind": "stratified-mean"}],
}
EFFECT_KINDS = ("value", "ote", "hte")


@dataclass
class RunConfig:
    data: str | None = None
    out: str = "out"
    roles: ColumnRoles = simgen.DEFAULT_ROLES
    folds: int = DEFAULT_K
    seed: int = 0
    epsilon: float = DEFAULT_EPSILON
    known_prob: float | None = None
    outcome_fit: str = "joint"
    cv_folds: int = 5
    libraries: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_LIBRARIES.items()})
    theta: float = 0.0
    alpha: float = 0.05
    correction: str = "holm"
    rule_mode: str = "threshold"
    require_significance: bool | None = None
    costs: str | None = None
    budget: float | None = None
    weighted: bool = True
    conservative: bool = False
    effects: list = field(default_factory=lambda: list(EFFECT_KINDS))
    static_arms: list = field(default_factory=lambda: [1])
    eval_mode: str = CROSS_VALIDATED
    simulate: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if not isinstance(self.roles, ColumnRoles):
            self.roles = ColumnRoles.from_dict(self.roles)
        libs = {k: list(v) for k, v in DEFAULT_LIBRARIES.items()}
        unknown = set(self.libraries) - set(libs)
        if unknown:
            raise ConfigError(f"unknown library name(s): {sorted(unknown)}")
        libs.update(self.libraries)
        self.libraries = libs
        self.learner_specs = {k: [LearnerSpec.from_dict(s) for s in v] for k, v in libs.items()}
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        TruncationPolicy(self.epsilon)
        if self.known_prob is not None and not 0 < self.known_prob < 1:
            raise ConfigError("known_prob must lie in (0, 1)")
        if self.outcome_fit not in ("joint", "arm-specific"):
            raise ConfigError("outcome_fit must be 'joint' or 'arm-specific'")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.correction not in CORRECTIONS:
            raise ConfigError(f"correction must be one of {CORRECTIONS}")
        if self.rule_mode not in ("threshold", "knapsack"):
            raise ConfigError("rule_mode must be 'threshold' or 'knapsack'")
        if self.eval_mode not in (PLUG_IN, CROSS_VALIDATED):
            raise ConfigError(f"eval_mode must be {PLUG_IN!r} or {CROSS_VALIDATED!r}")
        bad = set(self.effects) - set(EFFECT_KINDS)
        if bad:
            raise ConfigError(f"unknown effect kind(s): {sorted(bad)}")
        if any(a not in (0, 1) for a in self.static_arms):
            raise ConfigError("static_arms entries must be 0 or 1")
        if self.budget is not None and not (math.isfinite(self.budget) and self.budget >= 0):
            raise ConfigError("budget must be finite and >= 0")
        if not isinstance(self.simulate, dict):
            raise ConfigError("simulate must be a mapping")
        return self

    @classmethod
    def from_mapping(cls, doc) -> "RunConfig":
        doc = dict(doc or {})
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {sorted(unknown)}")
        return cls(**doc)


FLAG_TO_KEY = {
    "data": "data", "out": "out", "seed": "seed", "folds": "folds", "theta": "theta", "alpha": "alpha",
    "correction": "correction", "budget": "budget", "costs": "costs", "rule_mode": "rule_mode",
    "eval_mode": "eval_mode", "known_prob": "known_prob", "epsilon": "epsilon",
}


def load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config does not parse: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
    try:
        cfg = RunConfig.from_mapping(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    overrides = {key: getattr(args, flag) for flag, key in FLAG_TO_KEY.items() if getattr(args, flag, None) is not None}
    return replace(cfg, **overrides).validate()


def _costs(cfg: RunConfig, columns) -> CostSpec:
    if cfg.costs is None or cfg.budget is None:
        raise ConfigError("knapsack rule mode needs both a cost table (--costs) and a budget (--budget)")
    try:
        frame = pd.read_csv(cfg.costs)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ConfigError(f"cannot read cost table: {exc}") from None
    missing = [c for c in (*columns, "cost") if c not in frame.columns]
    if missing:
        raise ConfigError(f"cost table missing column(s): {missing}")
    keys = zip(*(frame[c].tolist() for c in columns))
    return CostSpec(cost={tuple(k): float(c) for k, c in zip(keys, frame["cost"])}, budget=cfg.budget)


def _rule_config(cfg: RunConfig, rule: TreatmentRule, columns) -> RuleConfig | None:
    prov = rule.provenance or {}
    kind = prov.get("kind")
    if kind == "static":
        return RuleConfig(mode="static", static_arm=prov["arm"])
    if kind == "threshold":
        return RuleConfig(mode="threshold", theta=prov["theta"], alpha=prov.get("alpha", cfg.alpha),
                          correction=prov.get("correction", cfg.correction),
                          require_significance=prov["require_significance"])
    if kind == "knapsack":
        if cfg.costs is None and "costs" in prov:
            costs = CostSpec({tuple(r[:-1]): r[-1] for r in prov["costs"]}, prov["budget"])
        else:
            costs = _costs(cfg, columns)
        return RuleConfig(mode="knapsack", theta=cfg.theta, alpha=cfg.alpha, correction=cfg.correction,
                          require_significance=prov.get("require_significance", False),
                          costs=costs, weighted=prov.get("weighted", True),
                          conservative=prov.get("conservative", False))
    return None


def _say(msg=""):
    print(msg)


# -- commands ----------------------------------------------------------------

def cmd_calculate(cfg: RunConfig) -> int:
    if not cfg.data:
        raise ConfigError("no data file given (--data or 'data' in config)")
    data = load_dataset(cfg.data, cfg.roles)
    idx = build_segment_index(data)
    folds = partition_folds(data.n, cfg.folds, cfg.seed, strata=data.A)
    specs = cfg.learner_specs
    nuis = cross_fit_nuisance(data, folds, specs["propensity"], specs["outcome"], TruncationPolicy(cfg.epsilon),
                              known_propensity=cfg.known_prob, outcome_fit=cfg.outcome_fit,
                              cv_folds=cfg.cv_folds, seed=cfg.seed)
    pseudo = compute_pseudo_outcome(data, nuis)
    table = test_segments(estimate_cate_by_segment(pseudo, idx, cfg.alpha), cfg.theta, cfg.correction, cfg.alpha)
    cate_sel = select_cate_function(pseudo, data.V, specs["cate"], K=cfg.cv_folds, seed=cfg.seed)

    out = cfg.out
    save_cache(os.path.join(out, CACHE_FILE), nuis, pseudo, fingerprint=data.fingerprint,
               roles=cfg.roles.to_dict(), libraries=cfg.libraries, index=idx, data=data)
    _io.atomic_write_text(os.path.join(out, CATE_CSV), table_to_csv(table))
    _io.write_json(os.path.join(out, CATE_JSON), {**table.to_dict(), "cate_function": cate_sel.describe(),
                                                  "epsilon": nuis.epsilon,
                                                  "epsilon_truncated_units": nuis.n_truncated})
    _io.atomic_write_text(os.path.join(out, PLOT_CSV), plot_data_csv(table))
    _say(f"calculate: n={data.n}, segments={len(idx.segments)}, K={cfg.folds}, "
         f"truncated propensities={nuis.n_truncated} (epsilon={nuis.epsilon})")
    _say(format_table(table))
    return EXIT_OK


def _cache_for(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no data file given (--data or 'data' in config)")
    if not os.path.exists(cfg.data):
        raise DataError(f"data file not found: {cfg.data}")
    cache = load_cache(os.path.join(cfg.out, CACHE_FILE), expected_fingerprint=file_fingerprint(cfg.data))
    if cache.index is None:
        raise StaleCacheError("cache has no segment index; rerun calculate")
    return cache


def cmd_segment(cfg: RunConfig) -> int:
    cache = _cache_for(cfg)
    idx = cache.index
    table = test_segments(estimate_cate_by_segment(cache.pseudo, idx, cfg.alpha), cfg.theta, cfg.correction,
                          cfg.alpha)
    extra = {}
    if cfg.rule_mode == "threshold":
        sig = True if cfg.require_significance is None else cfg.require_significance
        rule = threshold_rule(table, cfg.theta, cfg.alpha, sig, cfg.correction)
    else:
        costs = _costs(cfg, idx.columns)
        rule, sol = knapsack_rule(table, costs, weighted=cfg.weighted,
                                  conservative=cfg.conservative, require_significance=bool(cfg.require_significance))
        # Recorded so that assess can relearn the rule per fold without the cost file.
        rule.provenance["costs"] = [[*k, c] for k, c in costs.cost.items()]
        extra["knapsack"] = sol.to_dict()
    decided = replace(table, estimates=tuple(replace(e, treat=bool(rule.d(e.segment))) for e in table.estimates))

    out = cfg.out
    _io.write_json(os.path.join(out, RULE_JSON), {**rule.to_dict(), "fingerprint": cache.fingerprint,
                                                 "columns": list(idx.columns)})
    _io.atomic_write_text(os.path.join(out, SEGMENT_CSV), table_to_csv(decided))
    _io.write_json(os.path.join(out, SEGMENT_JSON), {**decided.to_dict(), **extra})
    _io.atomic_write_text(os.path.join(out, PLOT_CSV), plot_data_csv(decided))
    _say(f"segment: {cfg.rule_mode} rule treats {len(rule.treat_set)} of {len(idx.segments)} segments")
    if "knapsack" in extra:
        k = extra["knapsack"]
        _say(f"  knapsack objective={k['objective']:.6g} spend={k['spend']:.6g} budget={k['budget']:.6g} "
             f"solver={k['solver']}")
    _say(format_table(decided))
    return EXIT_OK


def cmd_assess(cfg: RunConfig) -> int:
    cache = _cache_for(cfg)
    data = cache.dataset_view()
    idx = cache.index
    try:
        rule_doc = _io.read_json(os.path.join(cfg.out, RULE_JSON))
    except FileNotFoundError:
        raise ConfigError(f"no rule file in {cfg.out}; run segment first") from None
    if rule_doc.get("fingerprint") not in (None, cache.fingerprint):
        raise StaleCacheError("rule file was built from a different dataset")
    rule = TreatmentRule.from_dict(rule_doc)
    if set(rule.segments) != set(idx.segments):
        raise StaleCacheError("rule segments do not match the cached segment index")

    nuis, pseudo = cache.nuisance, cache.pseudo
    mode = cfg.eval_mode
    rcfg = _rule_config(cfg, rule, idx.columns) if mode == CROSS_VALIDATED else None
    if mode == CROSS_VALIDATED and rcfg is None:
        mode = PLUG_IN
    folds = FoldAssignment(K=nuis.K, fold_of=nuis.fold_of, seed=nuis.seed)
    fold_rules = learn_fold_rules(rcfg, pseudo.D, idx, folds, cfg.alpha) if mode == CROSS_VALIDATED else None

    results = []
    for kind in cfg.effects:
        arms = cfg.static_arms if kind == "ote" else [None]
        for arm in arms:
            if mode == CROSS_VALIDATED:
                results.append(estimate_cv_rule_value(rcfg, data, folds, nuis, kind=kind, static_arm=arm or 1,
                                                      alpha=cfg.alpha, idx=idx, pseudo=pseudo,
                                                      fold_rules=fold_rules))
            elif kind == "value":
                results.append(estimate_value(rule, data, nuis, cfg.alpha, idx=idx))
            elif kind == "ote":
                results.append(estimate_ote(rule, arm, data, nuis, cfg.alpha, idx=idx))
            else:
                results.append(estimate_hte(rule, pseudo, idx, cfg.alpha))

    out = cfg.out
    _io.write_json(os.path.join(out, EFFECTS_JSON), {"evaluation_mode": mode, "rule": rule.to_dict(),
                                                    "effects": [r.to_dict() for r in results]})
    report = format_effects(results)
    _io.atomic_write_text(os.path.join(out, EFFECTS_TXT), report + "\n")
    _say(f"assess: {len(results)} effect estimate(s), mode={mode}")
    _say(report)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    sim = dict(cfg.simulate)
    sim.setdefault("seed", cfg.seed)
    spec = simgen.DgpSpec.from_dict(sim)
    frame = simgen.generate_frame(spec)
    path = cfg.data or os.path.join(cfg.out, SIM_DATA)
    truth = simgen.oracle_truth(spec)
    segs = truth.proportions
    rules = [truth.optimal_rule(cfg.theta),
             TreatmentRule(treat_set=frozenset(segs), segments=tuple(segs), provenance={"kind": "static", "arm": 1}),
             TreatmentRule(treat_set=frozenset(), segments=tuple(segs), provenance={"kind": "static", "arm": 0})]
    truth = simgen.oracle_truth(spec, rules)
    _io.atomic_write_text(path, simgen.to_csv(frame))
    _io.write_json(os.path.join(cfg.out, TRUTH_JSON), {"spec": spec.to_dict(), **truth.to_dict()})
    _say(f"simulate: wrote {len(frame)} rows to {path}")
    counts = frame.groupby(list(simgen.SEGMENT_COLUMNS)).size()
    for key, c in counts.items():
        _say(f"  segment {key}: n={c} true CATE={spec.tau[tuple(key)]:+.3f}")
    return EXIT_OK


COMMANDS = {"calculate": cmd_calculate, "segment": cmd_segment, "assess": cmd_assess, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalseg", description="Causal segment discovery pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "calculate": "fit nuisances, cache them, and estimate segment CATEs",
        "segment": "build a treatment rule from the cached estimates",
        "assess": "estimate population effects of the rule",
        "simulate": "write a synthetic dataset and its ground truth",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--data", help="delimited data file (for simulate: output path)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--theta", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--correction", choices=CORRECTIONS)
        p.add_argument("--budget", type=float)
        p.add_argument("--costs", help="cost table: segment columns plus 'cost'")
        p.add_argument("--rule-mode", dest="rule_mode", choices=("threshold", "knapsack"))
        p.add_argument("--eval-mode", dest="eval_mode", choices=(PLUG_IN, CROSS_VALIDATED))
        p.add_argument("--known-prob", dest="known_prob", type=float)
        p.add_argument("--epsilon", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        cfg = load_config(args)
        return COMMANDS[stage](cfg)
    except ConfigError as exc:
        code, tag, msg = EXIT_CONFIG, "config", exc
    except DataError as exc:
        code, tag, msg = EXIT_DATA, "data", exc
    except (DegenerateError, LearnerError) as exc:
        code, tag, msg = EXIT_DEGENERATE, "degenerate", exc
    except StaleCacheError as exc:
        code, tag, msg = EXIT_STALE, "cache", exc
    print(f"error [{stage}/{tag}]: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
