"""Causal segment discovery.

Doubly robust, cross-fitted estimates of segment-level treatment effects,
treatment rules built from them (thresholding or a budgeted knapsack), and
doubly robust evaluation of those rules.
"""
from .cate import (CateTable, SegmentCateEstimate, estimate_cate_by_segment, fit_cate_function,
                   test_segments)
from .dataset import (ColumnRoles, ExperimentDataset, FoldAssignment, SegmentIndex, build_segment_index,
                      from_frame, load_dataset, partition_folds)
from .effects import (RuleEffectEstimate, estimate_cv_rule_value, estimate_hte, estimate_ote,
                      estimate_value)
from .exceptions import (CausalSegError, ConfigError, ConvergenceError, DataError, DegenerateError,
                         LearnerError, RankDeficientError, StaleCacheError)
from .learners import FittedLearner, LearnerSpec, LibrarySelection, cv_select, fit, predict
from .nuisance import (NuisanceEstimates, PseudoOutcomes, TruncationPolicy, compute_pseudo_outcome,
                       cross_fit_nuisance)
from .rules import (CostSpec, KnapsackSolution, RuleConfig, TreatmentRule, knapsack_rule, static_rule,
                    threshold_rule)

__version__ = "0.1.0"
