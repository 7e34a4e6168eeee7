"""Regression learners with a common fit/predict contract, plus a discrete Super Learner.

Supported kinds:

``mean``
    Constant prediction equal to the training target mean.
``linear``
    Least squares with an optional ridge penalty on the slopes.
``logistic``
    Logistic regression fit by iteratively reweighted least squares.
``stratified-mean``
    Saturated model: one mean per distinct feature row, global mean for
    unseen rows.
``knn``
    k-nearest-neighbour average on standardized features.

``linear`` and ``logistic`` accept ``interactions=True`` which appends all
pairwise products of the input features to the design.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .exceptions import ConfigError, ConvergenceError, LearnerError, RankDeficientError

KINDS = ("mean", "linear", "logistic", "stratified-mean", "knn")
LOSSES = ("squared-error", "log-loss")

PROB_CLIP = 1e-12
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    ridge: float = DEFAULT_RIDGE
    k: int = 10
    interactions: bool = False
    loss: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        if not self.ridge >= 0:
            raise ConfigError("ridge penalty must be >= 0")
        if self.k < 1:
            raise ConfigError("knn requires k >= 1")
        if self.loss is None:
            object.__setattr__(self, "loss", "log-loss" if self.kind == "logistic" else "squared-error")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")

    def describe(self) -> dict:
        d = {"kind": self.kind, "loss": self.loss}
        if self.kind in ("linear", "logistic"):
            d["ridge"] = self.ridge
            d["interactions"] = self.interactions
        if self.kind == "knn":
            d["k"] = self.k
        return d

    @classmethod
    def from_dict(cls, d) -> "LearnerSpec":
        if isinstance(d, str):
            return cls(kind=d)
        d = dict(d)
        unknown = set(d) - {"kind", "ridge", "k", "interactions", "loss"}
        if unknown:
            raise ConfigError(f"unknown learner option(s): {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("learner entry needs a 'kind'")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class FittedLearner:
    spec: LearnerSpec
    n_features: int
    params: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class LibrarySelection:
    candidates: tuple[LearnerSpec, ...]
    risks: np.ndarray
    chosen: int
    model: FittedLearner | None = None

    @property
    def spec(self) -> LearnerSpec:
        return self.candidates[self.chosen]

    @property
    def risk(self) -> float:
        return float(self.risks[self.chosen])

    def describe(self) -> dict:
        return {
            "candidates": [c.describe() for c in self.candidates],
            "risks": [float(r) for r in self.risks],
            "chosen": self.chosen,
        }


def _as_matrix(features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def _expand(X: np.ndarray, interactions: bool) -> np.ndarray:
    if not interactions or X.shape[1] < 2:
        return X
    p = X.shape[1]
    prods = [X[:, i] * X[:, j] for i in range(p) for j in range(i + 1, p)]
    return np.column_stack([X, *prods])


def _fit_linear(X, y, ridge):
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc
    if ridge == 0.0:
        if X.shape[1] and np.linalg.matrix_rank(Xc) < X.shape[1]:
            raise RankDeficientError("rank-deficient; add ridge")
        coef = np.linalg.solve(gram, Xc.T @ yc) if X.shape[1] else np.empty(0)
    else:
        gram = gram + ridge * len(y) * np.eye(X.shape[1])
        coef = np.linalg.solve(gram, Xc.T @ yc)
    return {"coef": coef, "intercept": float(y_mean - x_mean @ coef)}


def _fit_logistic(X, y, ridge):
    n, p = X.shape
    Z = np.column_stack([np.ones(n), X])
    beta = np.zeros(p + 1)
    # Intercept is not penalized.
    pen = np.full(p + 1, ridge)
    pen[0] = 0.0
    for it in range(1, IRLS_MAX_ITER + 1):
        mu = expit(Z @ beta)
        grad = Z.T @ (mu - y) / n + pen * beta
        if np.linalg.norm(grad) <= IRLS_TOL:
            break
        w = mu * (1.0 - mu)
        hess = (Z * w[:, None]).T @ Z / n + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta - step
        if not np.all(np.isfinite(beta)):
            raise ConvergenceError("IRLS diverged", it)
    else:
        mu = expit(Z @ beta)
        grad = Z.T @ (mu - y) / n + pen * beta
        if np.linalg.norm(grad) > IRLS_TOL:
            raise ConvergenceError("IRLS did not converge", IRLS_MAX_ITER)
    return {"coef": beta[1:], "intercept": float(beta[0])}


def _fit_strata(X, y):
    keys, inverse = np.unique(X, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    sums = np.bincount(inverse, weights=y, minlength=len(keys))
    counts = np.bincount(inverse, minlength=len(keys))
    table = {tuple(row): s / c for row, s, c in zip(keys.tolist(), sums, counts)}
    return {"table": table, "global": float(y.mean())}


def _fit_knn(X, y, k):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Xs = (X - center) / scale
    return {"center": center, "scale": scale, "tree": cKDTree(Xs), "y": y.copy(), "k": min(k, len(y))}


def fit(spec: LearnerSpec, features, target) -> FittedLearner:
    X = _as_matrix(features)
    y = np.asarray(target, dtype=float).ravel()
    if X.shape[0] != len(y) or len(y) < 1:
        raise LearnerError("features and target must have the same, non-zero number of rows")
    if spec.loss == "log-loss" and np.any((y < 0) | (y > 1)):
        raise LearnerError("log-loss requires targets in [0, 1]")
    if spec.kind == "mean":
        params = {"mean": float(y.mean())}
    elif spec.kind == "linear":
        params = _fit_linear(_expand(X, spec.interactions), y, spec.ridge)
    elif spec.kind == "logistic":
        params = _fit_logistic(_expand(X, spec.interactions), y, spec.ridge)
    elif spec.kind == "stratified-mean":
        params = _fit_strata(X, y)
    else:
        params = _fit_knn(X, y, spec.k)
    return FittedLearner(spec=spec, n_features=X.shape[1], params=params)


def predict(model: FittedLearner, features) -> np.ndarray:
    X = _as_matrix(features)
    if X.shape[1] != model.n_features:
        raise LearnerError(f"schema mismatch: model expects {model.n_features} features, got {X.shape[1]}")
    spec, p = model.spec, model.params
    if spec.kind == "mean":
        out = np.full(X.shape[0], p["mean"])
    elif spec.kind == "linear":
        out = _expand(X, spec.interactions) @ p["coef"] + p["intercept"]
    elif spec.kind == "logistic":
        out = expit(_expand(X, spec.interactions) @ p["coef"] + p["intercept"])
    elif spec.kind == "stratified-mean":
        table, fallback = p["table"], p["global"]
        out = np.array([table.get(tuple(row), fallback) for row in X.tolist()], dtype=float)
    else:
        _, idx = p["tree"].query((X - p["center"]) / p["scale"], k=p["k"])
        idx = np.asarray(idx).reshape(X.shape[0], -1)
        out = p["y"][idx].mean(axis=1)
    if spec.loss == "log-loss":
        out = np.clip(out, PROB_CLIP, 1.0 - PROB_CLIP)
    return out


def loss_values(loss: str, pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    if loss == "squared-error":
        return (y - pred) ** 2
    pred = np.clip(pred, PROB_CLIP, 1.0 - PROB_CLIP)
    return -(y * np.log(pred) + (1.0 - y) * np.log1p(-pred))


def cv_select(candidates: Sequence[LearnerSpec], features, target, K: int = 5, seed: int | None = 0,
              refit: bool = True) -> LibrarySelection:
    """Discrete Super Learner: pick the candidate with the smallest K-fold held-out risk.

    A candidate that fails on any fold gets infinite risk.  Ties go to the
    lowest index.  With ``refit`` the winner is refit on all rows.
    """
    from .dataset import partition_folds

    candidates = tuple(candidates)
    if not candidates:
        raise ConfigError("learner library is empty")
    X = _as_matrix(features)
    y = np.asarray(target, dtype=float).ravel()
    binary = np.all((y == 0) | (y == 1))
    folds = partition_folds(len(y), K, seed, strata=y if binary else None)

    risks = np.empty(len(candidates))
    for j, spec in enumerate(candidates):
        total = 0.0
        try:
            for k in range(K):
                tr, va = folds.training(k), folds.validation(k)
                model = fit(spec, X[tr], y[tr])
                total += loss_values(spec.loss, predict(model, X[va]), y[va]).sum()
            risks[j] = total / len(y)
        except (LearnerError, np.linalg.LinAlgError):
            risks[j] = math.inf
        if not np.isfinite(risks[j]):
            risks[j] = math.inf
    if np.all(np.isinf(risks)):
        raise LearnerError("every candidate in the learner library failed to fit")
    chosen = int(np.argmin(risks))
    model = fit(candidates[chosen], X, y) if refit else None
    return LibrarySelection(candidates=candidates, risks=risks, chosen=chosen, model=model)


def with_loss(specs: Sequence[LearnerSpec], loss: str) -> tuple[LearnerSpec, ...]:
    return tuple(replace(s, loss=loss) for s in specs)
