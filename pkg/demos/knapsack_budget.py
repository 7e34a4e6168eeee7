"""How a treatment budget changes which segments get treated.

Each segment costs something per unit treated; the knapsack picks the set
with the largest total effect that fits the per-capita budget.
Run with ``python demos/knapsack_budget.py``.
"""
from causalseg import (CostSpec, LearnerSpec, build_segment_index, compute_pseudo_outcome, cross_fit_nuisance,
                       estimate_cate_by_segment, knapsack_rule, partition_folds, simgen, threshold_rule)

spec = simgen.DgpSpec(n=20_000, seed=11)
data = simgen.generate(spec)
folds = partition_folds(data.n, 10, seed=0, strata=data.A)
nuis = cross_fit_nuisance(data, folds, [LearnerSpec("logistic")], [LearnerSpec("linear", interactions=True)],
                          outcome_fit="arm-specific")
table = estimate_cate_by_segment(compute_pseudo_outcome(data, nuis), build_segment_index(data))

# Multi-device and premium households are pricier to serve.
cost = {seg: 1.0 + 0.5 * (seg[0] - 1) + 2.0 * seg[1] for seg in table.segments}
unconstrained = threshold_rule(table, require_significance=False)
full_spend = sum(cost[e.segment] * e.proportion for e in table.estimates if e.segment in unconstrained.treat_set)
print(f"treating every positive segment costs {full_spend:.3f} per unit\n")

print(" budget   spend   gain   treated")
for budget in (0.0, 0.25, 0.5, 1.0, 1.5, full_spend):
    rule, sol = knapsack_rule(table, CostSpec(cost, budget))
    print(f"{budget:7.3f} {sol.spend:7.3f} {sol.objective:6.3f}   {sorted(rule.treat_set)}")

# Conservative mode ranks by the lower confidence limit, so uncertain segments drop out first.
rule, sol = knapsack_rule(table, CostSpec(cost, 1.0), conservative=True)
print(f"\nconservative at budget 1.0: {sorted(rule.treat_set)} (gain {sol.objective:.3f})")
