"""Cross-fitted nuisance estimation and the doubly robust pseudo-outcome.

For every unit the propensity score ``g = P(A=1|W)`` and the outcome
regressions ``q0 = E(Y|A=0,W)``, ``q1 = E(Y|A=1,W)`` are predicted by models
that never saw that unit's fold.  The pseudo-outcome

    D = (2A - 1) / P(A|W) * (Y - q_A) + q1 - q0

has conditional mean equal to the treatment effect when either nuisance is
correct.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _io
from .dataset import ExperimentDataset, FoldAssignment, SegmentIndex
from .exceptions import ConfigError, DegenerateError, StaleCacheError
from .learners import LearnerSpec, LibrarySelection, cv_select, fit, predict, with_loss

DEFAULT_EPSILON = 0.01
DEFAULT_K = 10
CACHE_FORMAT = "causalseg.nuisance/1"


@dataclass(frozen=True)
class TruncationPolicy:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ConfigError(f"truncation epsilon must lie in (0, 0.5), got {self.epsilon}")

    def apply(self, g: np.ndarray) -> np.ndarray:
        return np.clip(g, self.epsilon, 1.0 - self.epsilon)


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    g: np.ndarray
    q0: np.ndarray
    q1: np.ndarray
    fold_of: np.ndarray
    epsilon: float
    K: int
    seed: int | None = None
    known_propensity: float | None = None
    outcome_fit: str = "joint"
    selections: list = field(default_factory=list)
    n_truncated: int = 0

    @property
    def n(self) -> int:
        return len(self.g)

    def prob_observed(self, A) -> np.ndarray:
        """P(A_i | W_i) at each unit's observed treatment."""
        return np.where(np.asarray(A) == 1, self.g, 1.0 - self.g)

    def q_at(self, a) -> np.ndarray:
        """Outcome regression evaluated at treatment ``a`` (scalar or per-unit array)."""
        return np.where(np.asarray(a) == 1, self.q1, self.q0)


@dataclass(frozen=True, eq=False)
class PseudoOutcomes:
    D: np.ndarray

    @property
    def n(self) -> int:
        return len(self.D)

    def summary(self) -> dict:
        return {"mean": float(self.D.mean()), "min": float(self.D.min()), "max": float(self.D.max())}


def _select(library, X, y, cv_folds, seed) -> LibrarySelection:
    # A one-candidate library needs no risk estimate to choose.
    if len(library) == 1:
        return LibrarySelection(candidates=tuple(library), risks=np.array([math.nan]), chosen=0,
                                model=fit(library[0], X, y))
    return cv_select(library, X, y, K=cv_folds, seed=seed)


def cross_fit_nuisance(
    data: ExperimentDataset,
    folds: FoldAssignment,
    propensity_library: Sequence[LearnerSpec],
    outcome_library: Sequence[LearnerSpec],
    trunc: TruncationPolicy = TruncationPolicy(),
    *,
    known_propensity: float | None = None,
    outcome_fit: str = "joint",
    cv_folds: int = 5,
    seed: int | None = 0,
) -> NuisanceEstimates:
    """Out-of-fold propensity and outcome predictions for every unit.

    ``outcome_fit="joint"`` regresses Y on (A, W) and predicts with A set to
    0 and 1; ``"arm-specific"`` fits a separate model of Y on W in each arm.
    ``known_propensity`` skips propensity fitting (randomized designs).
    """
    if len(folds.fold_of) != data.n:
        raise ConfigError("fold assignment does not cover the dataset")
    if outcome_fit not in ("joint", "arm-specific"):
        raise ConfigError(f"outcome_fit must be 'joint' or 'arm-specific', got {outcome_fit!r}")
    if known_propensity is None and not propensity_library:
        raise ConfigError("propensity library is empty")
    if not outcome_library:
        raise ConfigError("outcome library is empty")
    if known_propensity is not None and not 0.0 < known_propensity < 1.0:
        raise ConfigError("known propensity must lie in (0, 1)")
    prop_lib = with_loss(propensity_library, "log-loss")
    out_lib = tuple(outcome_library)

    A, Y, W = data.A, data.Y, data.W
    g = np.empty(data.n)
    q0 = np.empty(data.n)
    q1 = np.empty(data.n)
    selections = []
    for k in range(folds.K):
        tr, va = folds.training(k), folds.validation(k)
        arms = np.unique(A[tr])
        if len(arms) < 2:
            raise DegenerateError(f"degenerate fold {k}: training units contain one treatment arm; reduce K or stratify")
        chosen = {}
        if known_propensity is None:
            sel = _select(prop_lib, W[tr], A[tr], cv_folds, seed)
            g[va] = predict(sel.model, W[va])
            chosen["propensity"] = sel.describe()
        else:
            g[va] = known_propensity
        if outcome_fit == "joint":
            sel = _select(out_lib, np.column_stack([A[tr], W[tr]]), Y[tr], cv_folds, seed)
            q0[va] = predict(sel.model, np.column_stack([np.zeros(len(va)), W[va]]))
            q1[va] = predict(sel.model, np.column_stack([np.ones(len(va)), W[va]]))
            chosen["outcome"] = sel.describe()
        else:
            for arm, target in ((0, q0), (1, q1)):
                rows = tr[A[tr] == arm]
                sel = _select(out_lib, W[rows], Y[rows], cv_folds, seed)
                target[va] = predict(sel.model, W[va])
                chosen[f"outcome_arm{arm}"] = sel.describe()
        selections.append(chosen)

    clipped = trunc.apply(g)
    return NuisanceEstimates(
        g=clipped, q0=q0, q1=q1, fold_of=folds.fold_of.copy(), epsilon=trunc.epsilon, K=folds.K,
        seed=folds.seed, known_propensity=known_propensity, outcome_fit=outcome_fit,
        selections=selections, n_truncated=int(np.count_nonzero(clipped != g)),
    )


def pseudo_outcome(A, Y, g, q0, q1) -> np.ndarray:
    A = np.asarray(A)
    Y, g, q0, q1 = (np.asarray(x, dtype=float) for x in (Y, g, q0, q1))
    sign = 2.0 * A - 1.0
    prob = np.where(A == 1, g, 1.0 - g)
    q_obs = np.where(A == 1, q1, q0)
    return sign / prob * (Y - q_obs) + q1 - q0


def compute_pseudo_outcome(data: ExperimentDataset, nuis: NuisanceEstimates) -> PseudoOutcomes:
    if nuis.n != data.n:
        raise ConfigError("nuisance estimates are not aligned with the dataset")
    return PseudoOutcomes(D=pseudo_outcome(data.A, data.Y, nuis.g, nuis.q0, nuis.q1))


# -- cache -----------------------------------------------------------------

def cache_document(nuis: NuisanceEstimates, pseudo: PseudoOutcomes, *, fingerprint: str,
                   roles: dict | None = None, libraries: dict | None = None,
                   index: SegmentIndex | None = None, data: ExperimentDataset | None = None) -> dict:
    doc = {
        "format": CACHE_FORMAT,
        "fingerprint": fingerprint,
        "n": nuis.n,
        "K": nuis.K,
        "fold_seed": nuis.seed,
        "epsilon": nuis.epsilon,
        "epsilon_truncated_units": nuis.n_truncated,
        "known_propensity": nuis.known_propensity,
        "outcome_fit": nuis.outcome_fit,
        "roles": roles,
        "libraries": libraries,
        "selections": nuis.selections,
        "pseudo_outcome_summary": pseudo.summary(),
        "fold_of": nuis.fold_of.tolist(),
        "g": nuis.g.tolist(),
        "q0": nuis.q0.tolist(),
        "q1": nuis.q1.tolist(),
        "D": pseudo.D.tolist(),
    }
    if data is not None:
        doc["A"] = data.A.tolist()
        doc["Y"] = data.Y.tolist()
    if index is not None:
        doc["segments"] = {
            "columns": list(index.columns),
            "keys": [list(k) for k in index.segments],
            "membership": index.membership.tolist(),
        }
    return doc


def save_cache(path, nuis: NuisanceEstimates, pseudo: PseudoOutcomes, **kwargs) -> None:
    _io.write_json(path, cache_document(nuis, pseudo, **kwargs), indent=None)


@dataclass(frozen=True, eq=False)
class NuisanceCache:
    nuisance: NuisanceEstimates
    pseudo: PseudoOutcomes
    fingerprint: str
    index: SegmentIndex | None
    meta: dict
    A: np.ndarray | None = None
    Y: np.ndarray | None = None

    def dataset_view(self) -> ExperimentDataset:
        """Treatment, outcome and segment keys as a dataset without covariates."""
        if self.A is None or self.index is None:
            raise StaleCacheError("cache lacks unit-level treatment/outcome or segment data; rerun calculate")
        from .dataset import ColumnRoles

        roles = ColumnRoles.from_dict(self.meta["roles"]) if self.meta.get("roles") else ColumnRoles(
            "Y", "A", segmentation_cols=tuple(self.index.columns) or ("V",))
        keys = tuple(self.index.segments[j] for j in self.index.membership)
        return ExperimentDataset(roles=roles, A=self.A, Y=self.Y, W=np.empty((len(self.A), 0)), w_names=(),
                                 V=np.empty((len(self.A), 0)), segment_keys=keys, fingerprint=self.fingerprint)


def load_cache(path, expected_fingerprint: str | None = None) -> NuisanceCache:
    try:
        doc = _io.read_json(path)
    except FileNotFoundError:
        raise StaleCacheError(f"nuisance cache not found: {path}") from None
    except ValueError as exc:
        raise StaleCacheError(f"unreadable nuisance cache {path}: {exc}") from None
    if doc.get("format") != CACHE_FORMAT:
        raise StaleCacheError(f"{path} is not a nuisance cache of format {CACHE_FORMAT}")
    if expected_fingerprint is not None and doc["fingerprint"] != expected_fingerprint:
        raise StaleCacheError("stale cache: data fingerprint does not match the cached nuisance estimates")
    nuis = NuisanceEstimates(
        g=np.asarray(doc["g"], dtype=float), q0=np.asarray(doc["q0"], dtype=float),
        q1=np.asarray(doc["q1"], dtype=float), fold_of=np.asarray(doc["fold_of"], dtype=np.intp),
        epsilon=doc["epsilon"], K=doc["K"], seed=doc["fold_seed"],
        known_propensity=doc["known_propensity"], outcome_fit=doc["outcome_fit"],
        selections=doc["selections"], n_truncated=doc["epsilon_truncated_units"],
    )
    index = None
    if "segments" in doc:
        seg = doc["segments"]
        membership = np.asarray(seg["membership"], dtype=np.intp)
        keys = tuple(tuple(k) for k in seg["keys"])
        index = SegmentIndex(segments=keys, membership=membership,
                             counts=np.bincount(membership, minlength=len(keys)),
                             columns=tuple(seg["columns"]))
    meta = {k: v for k, v in doc.items() if k not in ("g", "q0", "q1", "D", "fold_of", "segments", "A", "Y")}
    A = np.asarray(doc["A"], dtype=np.int8) if "A" in doc else None
    Y = np.asarray(doc["Y"], dtype=float) if "Y" in doc else None
    return NuisanceCache(nuisance=nuis, pseudo=PseudoOutcomes(D=np.asarray(doc["D"], dtype=float)),
                         fingerprint=doc["fingerprint"], index=index, meta=meta, A=A, Y=Y)
