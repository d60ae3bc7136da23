"""Base regressors with one fit/predict contract.

Five kinds: ordinary least squares, LASSO (cyclic coordinate descent), CART
regression tree, random forest with out-of-bag bookkeeping, and
gradient-boosted trees under squared-error loss. Every fit is deterministic
given (data, hyperparams, seed), at any thread count.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .._util import map_ordered, spawn_rng
from ._tree import Tree, grow_tree, tree_predict

KINDS = ("ols", "lasso", "cart", "random_forest", "gbm")

_ALLOWED_HYPERPARAMS = {
    "ols": {"fit_intercept"},
    "lasso": {"lam", "tol", "max_iter", "fit_intercept"},
    "cart": {"max_depth", "min_leaf", "mtry"},
    "random_forest": {"n_trees", "max_depth", "min_leaf", "mtry", "bootstrap"},
    "gbm": {"n_trees", "learning_rate", "max_depth", "min_leaf", "subsample"},
}


@dataclass
class LearnerSpec:
    kind: str
    hyperparams: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind '{self.kind}' (known: {KINDS})")
        unknown = set(self.hyperparams) - _ALLOWED_HYPERPARAMS[self.kind]
        if unknown:
            raise ValueError(f"invalid hyperparams for {self.kind}: {sorted(unknown)}")

    @property
    def resolved_name(self) -> str:
        return self.name if self.name is not None else self.kind


@dataclass
class FittedModel:
    """A fitted regressor: linear coefficients or a tree collection."""

    kind: str
    n_features: int
    feature_names: Optional[List[str]] = None
    hyperparams: Dict[str, object] = field(default_factory=dict)
    intercept: float = 0.0
    coefficients: Optional[np.ndarray] = None
    trees: Optional[List[Tree]] = None
    baseline: float = 0.0
    learning_rate: float = 1.0
    oob_masks: Optional[np.ndarray] = None  # [n_trees, n_train] bool: True = row out-of-bag

    def predict(self, X: np.ndarray, feature_names: Optional[List[str]] = None) -> np.ndarray:
        return predict(self, X, feature_names)


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise ValueError("y must be a vector aligned with X rows")
    if X.shape[0] == 0:
        raise ValueError("cannot fit on zero rows")
    return X, y


def _check_names(feature_names, p):
    if feature_names is not None and len(feature_names) != p:
        raise ValueError(f"{len(feature_names)} feature names for {p} columns")
    return list(feature_names) if feature_names is not None else None


# ---------------------------------------------------------------------------
# Linear models
# ---------------------------------------------------------------------------


def fit_ols(X, y, fit_intercept: bool = True, feature_names=None) -> FittedModel:
    """Least squares with intercept; rank-deficient X gets the minimum-norm fit."""
    X, y = _check_xy(X, y)
    n, p = X.shape
    if fit_intercept:
        A = np.column_stack([np.ones(n), X])
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        intercept, slopes = float(coef[0]), coef[1:]
    else:
        slopes, *_ = np.linalg.lstsq(X, y, rcond=None)
        intercept = 0.0
    return FittedModel(
        kind="ols",
        n_features=p,
        feature_names=_check_names(feature_names, p),
        hyperparams={"fit_intercept": fit_intercept},
        intercept=intercept,
        coefficients=np.asarray(slopes, dtype=np.float64),
    )


def _soft_threshold(rho: float, t: float) -> float:
    if rho > t:
        return rho - t
    if rho < -t:
        return rho + t
    return 0.0


def fit_lasso(
    X,
    y,
    lam: float,
    tol: float = 1e-7,
    max_iter: int = 100_000,
    fit_intercept: bool = True,
    feature_names=None,
) -> FittedModel:
    """Minimize sum((y - yhat)^2) + lam * sum(|beta_j|) by coordinate descent.

    The intercept is unpenalized. Coordinates cycle in input order; a sweep
    where the largest coefficient change is below tol stops the descent.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    X, y = _check_xy(X, y)
    n, p = X.shape
    norms = np.einsum("ij,ij->j", X, X)
    beta = np.zeros(p)
    intercept = float(np.mean(y)) if fit_intercept else 0.0
    r = y - intercept  # residual y - intercept - X @ beta, kept incrementally
    half_lam = lam / 2.0
    for _ in range(max_iter):
        max_delta = 0.0
        if fit_intercept:
            shift = float(np.mean(r))
            if shift != 0.0:
                intercept += shift
                r -= shift
                max_delta = abs(shift)
        for j in range(p):
            if norms[j] == 0.0:
                continue
            old = beta[j]
            rho = float(X[:, j] @ r) + norms[j] * old
            new = _soft_threshold(rho, half_lam) / norms[j]
            if new != old:
                r += X[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            break
    return FittedModel(
        kind="lasso",
        n_features=p,
        feature_names=_check_names(feature_names, p),
        hyperparams={"lam": lam, "tol": tol, "max_iter": max_iter, "fit_intercept": fit_intercept},
        intercept=intercept,
        coefficients=beta,
    )


def lasso_objective(X, y, intercept: float, beta: np.ndarray, lam: float) -> float:
    r = y - intercept - np.asarray(X) @ beta
    return float(r @ r + lam * np.sum(np.abs(beta)))


# ---------------------------------------------------------------------------
# Trees
# ---------------------------------------------------------------------------


def fit_cart(
    X,
    y,
    max_depth: Optional[int] = None,
    min_leaf: int = 1,
    mtry: Optional[int] = None,
    seed: int = 0,
    feature_names=None,
) -> FittedModel:
    """Grow a single regression tree (leaves predict node means)."""
    X, y = _check_xy(X, y)
    n, p = X.shape
    mtry = p if mtry is None else int(mtry)
    rng = spawn_rng(seed, "cart") if mtry < p else None
    tree = grow_tree(X, y, max_depth, min_leaf, mtry, rng)
    return FittedModel(
        kind="cart",
        n_features=p,
        feature_names=_check_names(feature_names, p),
        hyperparams={"max_depth": max_depth, "min_leaf": min_leaf, "mtry": mtry, "seed": seed},
        trees=[tree],
    )


def fit_random_forest(
    X,
    y,
    n_trees: int = 100,
    max_depth: Optional[int] = None,
    min_leaf: int = 1,
    mtry: Optional[int] = None,
    bootstrap: bool = True,
    seed: int = 0,
    feature_names=None,
    threads: int = 1,
) -> FittedModel:
    """Bootstrap-aggregated fully-grown trees with per-row OOB bookkeeping.

    Each tree's RNG is derived by hashing (seed, tree index), so fitting is
    reproducible under any parallel schedule.
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    mtry = max(1, math.ceil(p / 3)) if mtry is None else int(mtry)

    def build(t: int):
        rng = spawn_rng(seed, t)
        if bootstrap:
            sample = rng.integers(0, n, size=n)
            oob = np.ones(n, dtype=bool)
            oob[sample] = False
            tree = grow_tree(X[sample], y[sample], max_depth, min_leaf, mtry, rng)
        else:
            oob = np.zeros(n, dtype=bool)
            tree = grow_tree(X, y, max_depth, min_leaf, mtry, rng)
        return tree, oob

    results = map_ordered(build, range(n_trees), threads)
    return FittedModel(
        kind="random_forest",
        n_features=p,
        feature_names=_check_names(feature_names, p),
        hyperparams={
            "n_trees": n_trees,
            "max_depth": max_depth,
            "min_leaf": min_leaf,
            "mtry": mtry,
            "bootstrap": bootstrap,
            "seed": seed,
        },
        trees=[r[0] for r in results],
        oob_masks=np.stack([r[1] for r in results]),
    )


def fit_gbm(
    X,
    y,
    n_trees: int = 100,
    learning_rate: float = 0.1,
    max_depth: Optional[int] = 3,
    min_leaf: int = 1,
    subsample: float = 1.0,
    seed: int = 0,
    feature_names=None,
) -> FittedModel:
    """Gradient boosting under squared error: stage m fits a tree to residuals.

    Prediction is mean(y) + learning_rate * sum of stage trees. With
    subsample = 1 the training MSE is non-increasing per stage.
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    if n_trees < 0:
        raise ValueError(f"n_trees must be >= 0, got {n_trees}")
    if not 0.0 < learning_rate <= 1.0:
        raise ValueError(f"learning_rate must be in (0, 1], got {learning_rate}")
    if not 0.0 < subsample <= 1.0:
        raise ValueError(f"subsample must be in (0, 1], got {subsample}")

    baseline = float(np.mean(y))
    residual = y - baseline
    trees: List[Tree] = []
    for m in range(n_trees):
        if subsample < 1.0:
            rng = spawn_rng(seed, m)
            count = max(1, int(round(subsample * n)))
            rows = np.sort(rng.choice(n, size=count, replace=False))
            tree = grow_tree(X[rows], residual[rows], max_depth, min_leaf, p, None)
        else:
            tree = grow_tree(X, residual, max_depth, min_leaf, p, None)
        residual = residual - learning_rate * tree_predict(tree, X)
        trees.append(tree)
    return FittedModel(
        kind="gbm",
        n_features=p,
        feature_names=_check_names(feature_names, p),
        hyperparams={
            "n_trees": n_trees,
            "learning_rate": learning_rate,
            "max_depth": max_depth,
            "min_leaf": min_leaf,
            "subsample": subsample,
            "seed": seed,
        },
        trees=trees,
        baseline=baseline,
        learning_rate=learning_rate,
    )


# ---------------------------------------------------------------------------
# Shared predict / dispatch
# ---------------------------------------------------------------------------


def predict(model: FittedModel, X, feature_names: Optional[List[str]] = None) -> np.ndarray:
    """Predict with any fitted model; the input schema must match fit time."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if X.shape[1] != model.n_features:
        raise ValueError(f"model was fit on {model.n_features} features, got {X.shape[1]}")
    if feature_names is not None and model.feature_names is not None:
        if list(feature_names) != model.feature_names:
            raise ValueError("feature names/order differ from fit time")

    if model.kind in ("ols", "lasso"):
        return model.intercept + X @ model.coefficients
    if model.kind == "cart":
        return tree_predict(model.trees[0], X)
    if model.kind == "random_forest":
        preds = np.stack([tree_predict(t, X) for t in model.trees])
        return preds.mean(axis=0)
    if model.kind == "gbm":
        out = np.full(X.shape[0], model.baseline)
        for t in model.trees:
            out = out + model.learning_rate * tree_predict(t, X)
        return out
    raise ValueError(f"unknown model kind '{model.kind}'")


def fit_learner(spec: LearnerSpec, X, y, feature_names=None, threads: int = 1) -> FittedModel:
    """Fit by spec; hyperparams were validated at spec construction."""
    hp = dict(spec.hyperparams)
    if spec.kind == "ols":
        return fit_ols(X, y, feature_names=feature_names, **hp)
    if spec.kind == "lasso":
        hp.setdefault("lam", 1.0)
        return fit_lasso(X, y, feature_names=feature_names, **hp)
    if spec.kind == "cart":
        return fit_cart(X, y, seed=spec.seed, feature_names=feature_names, **hp)
    if spec.kind == "random_forest":
        return fit_random_forest(
            X, y, seed=spec.seed, feature_names=feature_names, threads=threads, **hp
        )
    if spec.kind == "gbm":
        return fit_gbm(X, y, seed=spec.seed, feature_names=feature_names, **hp)
    raise ValueError(f"unknown learner kind '{spec.kind}'")
