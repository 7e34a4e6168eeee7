"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The simulation studies are marked ``slow`` but run by default; the whole
module takes a few minutes on one core.
"""
import contextlib
import io
import itertools
import math
import time

import numpy as np
import pandas as pd
import pytest

from causalseg import (ColumnRoles, CostSpec, LearnerSpec, RuleConfig, build_segment_index, compute_pseudo_outcome,
                       cross_fit_nuisance, estimate_cate_by_segment, estimate_cv_rule_value, estimate_hte,
                       estimate_ote, from_frame, knapsack_rule, partition_folds, simgen, static_rule, test_segments,
                       threshold_rule)
from causalseg.cate import normal_ci, one_sided_p
from causalseg.cli import main
from causalseg.effects import learn_fold_rules
from causalseg.nuisance import NuisanceEstimates

from conftest import make_table, record_criterion

LOGISTIC = [LearnerSpec("logistic")]
LINEAR_INTERACTIONS = [LearnerSpec("linear", interactions=True)]
MEAN = [LearnerSpec("mean")]


def _fit(data, folds, propensity, outcome, outcome_fit):
    nuis = cross_fit_nuisance(data, folds, propensity, outcome, outcome_fit=outcome_fit)
    return nuis, compute_pseudo_outcome(data, nuis)


def test_criterion_1_table2_arithmetic():
    rows = [(0.283, 0.089, (0.108, 0.459), 0.001, 0.0005), (-0.595, 0.063, (-0.719, -0.471), 1.000, 0.001)]
    details, ok = [], True
    table = test_segments(make_table([((1, 0), 0.5, 0.283, 0.089), ((2, 0), 0.5, -0.595, 0.063)]),
                          correction="none")
    for (cate, se, ci, p, p_tol), row in zip(rows, table.estimates):
        lo, hi = normal_ci(cate, se)
        p_hat = one_sided_p(cate, se)
        ok &= abs(lo - ci[0]) <= 0.002 and abs(hi - ci[1]) <= 0.002 and abs(p_hat - p) <= p_tol
        ok &= (row.ci_lower, row.ci_upper, row.p_raw) == (lo, hi, p_hat)
        details.append(f"({cate}, {se}) -> [{lo:.4f}, {hi:.4f}] p={p_hat:.5f}")
    record_criterion(1, "Table 2 inference arithmetic", ok, "; ".join(details))
    assert ok


def test_criterion_2_pseudo_outcome_oracle():
    rng = np.random.default_rng(2024)
    n = 1000
    A = rng.integers(0, 2, n)
    Y = rng.normal(0, 3, n)
    g = rng.uniform(0.01, 0.99, n)
    q0, q1 = rng.normal(0, 2, (2, n))
    data = from_frame(pd.DataFrame({"y": Y, "a": A, "v": 0}), ColumnRoles("y", "a", segmentation_cols=("v",)))
    nuis = NuisanceEstimates(g=g, q0=q0, q1=q1, fold_of=np.zeros(n, dtype=int), epsilon=0.01, K=2)
    D = compute_pseudo_outcome(data, nuis).D
    direct = []
    for a, y, p1, m0, m1 in zip(A.tolist(), Y.tolist(), g.tolist(), q0.tolist(), q1.tolist()):
        if a == 1:
            direct.append((y - m1) / p1 + m1 - m0)
        else:
            direct.append(-(y - m0) / (1.0 - p1) + m1 - m0)
    err = float(np.max(np.abs(D - np.array(direct))))
    ok = err <= 1e-12
    record_criterion(2, "pseudo-outcome vs direct formula", ok, f"max |diff| over {n} tuples = {err:.2e}")
    assert ok


@pytest.mark.slow
def test_criterion_3_ci_coverage():
    reps, n = 500, 5000
    truth = simgen.oracle_truth(simgen.DgpSpec())
    hits = {v: 0 for v in truth.proportions}
    seen = {v: 0 for v in truth.proportions}
    small = set()
    for r in range(reps):
        data = simgen.generate(simgen.DgpSpec(n=n, seed=1000 + r))
        folds = partition_folds(n, 10, r, strata=data.A)
        _, pseudo = _fit(data, folds, LOGISTIC, LINEAR_INTERACTIONS, "arm-specific")
        for e in estimate_cate_by_segment(pseudo, build_segment_index(data)).estimates:
            if e.n_v < 100:
                small.add(e.segment)
                continue
            seen[e.segment] += 1
            hits[e.segment] += e.ci_lower <= truth.true_cate[e.segment] <= e.ci_upper
    rates = {v: hits[v] / seen[v] for v in hits if seen[v]}
    ok = all(0.93 <= r <= 0.97 for r in rates.values())
    detail = (f"{reps} reps, coverage range [{min(rates.values()):.3f}, {max(rates.values()):.3f}] over "
              f"{len(rates)} segments" + (f"; segments ever below n_v=100: {sorted(small)}" if small else ""))
    record_criterion(3, "per-segment 95% CI coverage in [0.93, 0.97]", ok, detail)
    assert ok, rates


@pytest.mark.slow
def test_criterion_4_double_robustness():
    reps, n = 200, 20_000
    truth = simgen.oracle_truth(simgen.DgpSpec())
    segs = list(truth.proportions)
    est = {"a": np.empty((reps, 10)), "b": np.empty((reps, 10)), "naive": np.empty((reps, 10))}
    for r in range(reps):
        data = simgen.generate(simgen.DgpSpec(n=n, seed=5000 + r))
        idx = build_segment_index(data)
        assert list(idx.segments) == segs
        folds = partition_folds(n, 10, r, strata=data.A)
        # (a) propensity misspecified as a constant, outcome correctly specified.
        _, pa = _fit(data, folds, MEAN, LINEAR_INTERACTIONS, "arm-specific")
        # (b) propensity correct, outcome misspecified as a constant.
        _, pb = _fit(data, folds, LOGISTIC, MEAN, "joint")
        est["a"][r] = [e.cate for e in estimate_cate_by_segment(pa, idx).estimates]
        est["b"][r] = [e.cate for e in estimate_cate_by_segment(pb, idx).estimates]
        for j in range(10):
            m = idx.membership == j
            est["naive"][r, j] = data.Y[m & (data.A == 1)].mean() - data.Y[m & (data.A == 0)].mean()
    tau = np.array([truth.true_cate[v] for v in segs])
    ratio = {}
    for name, values in est.items():
        bias = values.mean(axis=0) - tau
        mc_se = values.std(axis=0, ddof=1) / math.sqrt(reps)
        ratio[name] = np.abs(bias) / mc_se
    ok = ratio["a"].max() <= 3 and ratio["b"].max() <= 3 and ratio["naive"].max() > 5
    detail = (f"max |bias|/MCSE: (a) {ratio['a'].max():.2f}, (b) {ratio['b'].max():.2f}; "
              f"naive difference-in-means max {ratio['naive'].max():.1f} "
              f"({int((ratio['naive'] > 5).sum())}/10 segments above 5)")
    record_criterion(4, "double robustness at n=20000", ok, detail)
    assert ok, ratio


def _enumerate(benefit, weight, budget):
    best = 0.0
    for r in range(len(benefit) + 1):
        for combo in itertools.combinations(range(len(benefit)), r):
            if math.fsum(weight[i] for i in combo) <= budget:
                best = max(best, math.fsum(benefit[i] for i in combo))
    return best


def test_criterion_5_knapsack_optimality():
    rng = np.random.default_rng(77)
    instances, mismatches, infeasible, zero_budget = 1000, 0, 0, 0
    for i in range(instances):
        m = int(rng.integers(1, 16))
        positive = int(rng.integers(0, m + 1))
        cates = np.concatenate([rng.uniform(0.01, 5, positive), -rng.uniform(0, 5, m - positive)])
        props = rng.dirichlet(np.ones(m))
        costs = rng.uniform(0, 10, m)
        costs[rng.random(m) < 0.1] = 0.0
        total = float(np.sum(costs * props))
        budget = 0.0 if i % 10 == 0 else float(rng.uniform(0, 1.2) * total)
        zero_budget += budget == 0.0
        table = make_table([((j,), p, c, 0.1) for j, (p, c) in enumerate(zip(props, cates))], columns=("v",))
        rule, sol = knapsack_rule(table, CostSpec({(j,): float(c) for j, c in enumerate(costs)}, budget))
        cand = [j for j in range(m) if cates[j] > 0]
        best = _enumerate([cates[j] * props[j] for j in cand], [costs[j] * props[j] for j in cand], budget)
        mismatches += sol.objective != best
        infeasible += not (sol.spend <= budget)
        infeasible += any(cates[k[0]] <= 0 for k in rule.treat_set)
    ok = mismatches == 0 and infeasible == 0
    record_criterion(5, "knapsack matches exhaustive enumeration", ok,
                     f"{instances} instances ({zero_budget} with budget 0): {mismatches} objective mismatches, "
                     f"{infeasible} infeasible")
    assert ok


def test_criterion_6_effect_identities():
    worst_hte, worst_total, ote_ok, runs = 0.0, 0.0, True, 20
    for r in range(runs):
        data = simgen.generate(simgen.DgpSpec(n=2000, seed=300 + r))
        idx = build_segment_index(data)
        folds = partition_folds(data.n, 5, r, strata=data.A)
        nuis, pseudo = _fit(data, folds, LOGISTIC, LINEAR_INTERACTIONS, "joint")
        table = estimate_cate_by_segment(pseudo, idx)
        ote = estimate_ote(static_rule(1, idx), 1, data, nuis, idx=idx)
        ote_ok &= ote.estimate == 0.0 and ote.se == 0.0
        total = math.fsum(e.proportion * e.cate for e in table.estimates)
        worst_total = max(worst_total, abs(total - pseudo.D.mean()))
        rule = threshold_rule(table)
        in_t = rule.decisions(idx).astype(bool)
        p_t = in_t.mean()
        D = pseudo.D
        worst_hte = max(worst_hte, abs(p_t * D[in_t].mean() + (1 - p_t) * D[~in_t].mean() - D.mean()))
        hte = estimate_hte(rule, pseudo, idx)
        worst_hte = max(worst_hte, abs(hte.estimate - (D[in_t].mean() - D[~in_t].mean())))
    ok = ote_ok and worst_hte <= 1e-10 and worst_total <= 1e-10
    record_criterion(6, "effect identities", ok,
                     f"{runs} runs: OTE(static 1 vs 1)=0 with se=0 exactly: {ote_ok}; "
                     f"HTE decomposition max err {worst_hte:.1e}; sum p*cate vs mean D max err {worst_total:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_7_cross_validated_rule_consistency():
    reps, n = 200, 20_000
    spec = simgen.DgpSpec()
    truth = simgen.oracle_truth(spec)
    optimal = truth.optimal_rule(0.0)
    config = RuleConfig()
    ote, hte, matched = np.empty(reps), np.empty(reps), 0
    for r in range(reps):
        data = simgen.generate(simgen.DgpSpec(n=n, seed=9000 + r))
        idx = build_segment_index(data)
        folds = partition_folds(n, 10, r, strata=data.A)
        nuis, pseudo = _fit(data, folds, LOGISTIC, LINEAR_INTERACTIONS, "arm-specific")
        rules = learn_fold_rules(config, pseudo.D, idx, folds)
        matched += sum(rule.treat_set == optimal.treat_set for rule in rules)
        common = dict(idx=idx, pseudo=pseudo, fold_rules=rules)
        ote[r] = estimate_cv_rule_value(config, data, folds, nuis, kind="ote", static_arm=1, **common).estimate
        hte[r] = estimate_cv_rule_value(config, data, folds, nuis, kind="hte", **common).estimate
    t_ote, t_hte = truth.ote(optimal, 1), truth.hte(optimal)
    z_ote = abs(ote.mean() - t_ote) / (ote.std(ddof=1) / math.sqrt(reps))
    z_hte = abs(hte.mean() - t_hte) / (hte.std(ddof=1) / math.sqrt(reps))
    ok = z_ote <= 3 and z_hte <= 3
    record_criterion(7, "cross-validated OTE/HTE vs oracle", ok,
                     f"OTE mean {ote.mean():.4f} vs truth {t_ote:.4f} ({z_ote:.2f} MCSE); "
                     f"HTE mean {hte.mean():.4f} vs truth {t_hte:.4f} ({z_hte:.2f} MCSE); "
                     f"fold rules equal to the oracle rule: {matched}/{reps * 10}")
    assert ok


def _timed(argv):
    start = time.perf_counter()
    with contextlib.redirect_stdout(io.StringIO()):
        code = main([str(a) for a in argv])
    assert code == 0, argv
    return time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_determinism_and_stage_isolation(tmp_path):
    outputs, calc, downstream = [], 0.0, 0.0
    for name in ("run1", "run2"):
        out = tmp_path / name
        data = out / "simulated.csv"
        _timed(["simulate", "--out", out, "--seed", 0])
        calc += _timed(["calculate", "--data", data, "--out", out, "--seed", 0])
        downstream += _timed(["segment", "--data", data, "--out", out, "--seed", 0])
        downstream += _timed(["assess", "--data", data, "--out", out, "--seed", 0])
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    identical = outputs[0] == outputs[1]
    share = downstream / calc
    ok = identical and share <= 0.05
    record_criterion(8, "determinism and stage isolation", ok,
                     f"{len(outputs[0])} artifacts byte-identical: {identical}; segment+assess = {100 * share:.1f}% "
                     f"of calculate ({downstream:.3f}s vs {calc:.3f}s over two runs)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
