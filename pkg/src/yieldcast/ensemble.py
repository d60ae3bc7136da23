"""Base-learner combiners: optimized simplex weights, average, EWA, stacking.

The optimized weighted ensemble minimizes the mean squared error of combined
out-of-bag predictions over the probability simplex (projected gradient with
exact Euclidean projection, then an active-set polish); since every basis
vector is feasible, its OOB MSE never exceeds the best single learner's.
"""

import csv
import json
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .learners import FittedModel, LearnerSpec, fit_learner, model_from_dict, model_to_dict, predict
from .metrics import rmse
from .validation import OobMatrix

_WEIGHTS_MSE_ROW = "oob_mse"


@dataclass
class EnsembleWeights:
    weights: np.ndarray
    learner_names: List[str]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.shape[0] != len(self.learner_names):
            raise ValueError("weights must align with learner names")
        if self.weights.shape[0] < 1:
            raise ValueError("need at least one learner")
        if np.any(self.weights < 0):
            raise ValueError(f"negative weight: {self.weights}")
        total = math.fsum(self.weights.tolist())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {total!r}, not 1")


@dataclass
class StackedModel:
    """Base models refit on the full training set plus a second-level model
    fit on their out-of-bag predictions."""

    base_models: List[FittedModel]
    learner_names: List[str]
    level2: FittedModel

    def __post_init__(self):
        if len(self.base_models) != len(self.learner_names):
            raise ValueError("base models must align with learner names")
        if self.level2.n_features != len(self.base_models):
            raise ValueError(
                f"level-2 model expects {self.level2.n_features} inputs, "
                f"got {len(self.base_models)} base models"
            )


def _objective(Q, b, c, w) -> float:
    return float(w @ Q @ w - 2.0 * (b @ w) + c)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w : w >= 0, sum w = 1} (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ind = np.arange(1, v.size + 1)
    cond = u > (css - 1.0) / ind
    rho = ind[cond][-1]
    theta = (css[rho - 1] - 1.0) / rho
    return np.maximum(v - theta, 0.0)


def _kkt_residual(g: np.ndarray, w: np.ndarray, support_tol: float = 1e-12) -> float:
    """Max violation of simplex optimality: equal gradients on the support,
    no smaller gradient off it."""
    support = w > support_tol
    nu = float(np.min(g[support]))
    res = float(np.max(np.abs(g[support] - nu)))
    off = ~support
    if off.any():
        res = max(res, float(np.max(nu - g[off])))
    return res


def _solve_on_support(Q, b, support):
    """Equality-constrained solve on a support: returns (weights, multiplier)."""
    s = len(support)
    kkt = np.zeros((s + 1, s + 1))
    kkt[:s, :s] = 2.0 * Q[np.ix_(support, support)]
    kkt[:s, s] = 1.0
    kkt[s, :s] = 1.0
    rhs = np.concatenate([2.0 * b[support], [1.0]])
    try:
        sol = np.linalg.solve(kkt, rhs)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    return sol[:s], float(sol[s])


def _active_set_solve(Q, b, support, tol):
    """Primal active-set refinement: drop negative coordinates, add violated
    ones, until the exact KKT point for the simplex QP is found."""
    k = Q.shape[0]
    support = sorted(set(support)) or list(range(k))
    for _ in range(4 * k + 16):
        ws, nu = _solve_on_support(Q, b, support)
        if not np.all(np.isfinite(ws)):
            return None
        if np.any(ws < -1e-13):
            drop = support[int(np.argmin(ws))]
            support = [j for j in support if j != drop]
            if not support:
                return None
            continue
        w = np.zeros(k)
        w[support] = np.maximum(ws, 0.0)
        total = w.sum()
        if total <= 0:
            return None
        w /= total
        g = 2.0 * (Q @ w - b)
        off = [j for j in range(k) if j not in support]
        violated = [j for j in off if g[j] < nu - tol]
        if not violated:
            return w
        support = sorted(support + [min(violated, key=lambda j: g[j])])
    return None


def solve_optimal_weights(oob: OobMatrix, max_iter: int = 100_000) -> EnsembleWeights:
    """Minimize mean squared OOB error of the weighted combination over the
    probability simplex.

    Projected gradient with fixed step 1/L (L = 2*lambda_max(P'P)/n) runs
    until the objective change drops below 1e-12 and the KKT residual is tiny,
    then an active-set solve polishes the optimum to machine precision.
    """
    P = np.asarray(oob.predictions, dtype=np.float64)
    y = np.asarray(oob.truth, dtype=np.float64)
    if not np.all(np.isfinite(P)):
        raise ValueError("non-finite out-of-bag predictions")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite truth values")
    n, k = P.shape
    if n < 1 or k < 1:
        raise ValueError("need at least one row and one learner")
    if k == 1:
        return EnsembleWeights(weights=np.array([1.0]), learner_names=list(oob.learner_names))

    # Normalize so objective magnitudes are O(1) regardless of response units
    # (kg/ha-scale values would otherwise swamp the stopping thresholds).
    # Weights are unchanged by a common rescaling of P and y.
    unit = max(1.0, float(np.sqrt(np.mean(y * y))), float(np.sqrt(np.mean(P * P))))
    P = P / unit
    y = y / unit

    Q = (P.T @ P) / n
    Q = (Q + Q.T) / 2.0
    b = (P.T @ y) / n
    c = float(y @ y) / n
    L = 2.0 * float(np.linalg.eigvalsh(Q)[-1])
    w = np.full(k, 1.0 / k)
    if L <= 0.0 or not np.isfinite(L):
        # All-zero predictions: objective is constant in w.
        return EnsembleWeights(weights=project_simplex(w), learner_names=list(oob.learner_names))

    step = 1.0 / L
    scale = max(1.0, L)
    f_prev = _objective(Q, b, c, w)
    stalled = 0
    for _ in range(max_iter):
        g = 2.0 * (Q @ w - b)
        w_next = project_simplex(w - step * g)
        f_next = _objective(Q, b, c, w_next)
        converged = abs(f_prev - f_next) < 1e-12
        w = w_next
        f_prev = f_next
        if not converged:
            stalled = 0
            continue
        stalled += 1
        if _kkt_residual(2.0 * (Q @ w - b), w) < 1e-10 * scale:
            break
        if stalled >= 50:
            # Objective has flatlined with gradients still unequal: finish
            # with an exact active-set solve seeded from the current support.
            break

    support = np.nonzero(w > 1e-10)[0].tolist()
    refined = _active_set_solve(Q, b, support, tol=1e-12 * scale)
    if refined is not None and _objective(Q, b, c, refined) <= f_prev + 1e-12 * scale:
        if _kkt_residual(2.0 * (Q @ refined - b), refined) <= 1e-8 * scale:
            w = refined
    return EnsembleWeights(weights=w, learner_names=list(oob.learner_names))


def average_weights(k: int, learner_names: Optional[List[str]] = None) -> EnsembleWeights:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    names = list(learner_names) if learner_names is not None else [f"m{i}" for i in range(k)]
    if len(names) != k:
        raise ValueError("learner names must have length k")
    return EnsembleWeights(weights=np.full(k, 1.0 / k), learner_names=names)


def ewa_weights(
    oob_errors: Sequence[float],
    temperature: float = 1.0,
    learner_names: Optional[List[str]] = None,
) -> EnsembleWeights:
    """w_j proportional to exp(-temperature * e_j), max-subtracted for stability.

    Errors should be dimensionless (out-of-bag RRMSE by default in the
    pipeline); raw kg/ha errors would collapse the softmax.
    """
    e = np.asarray(oob_errors, dtype=np.float64)
    if e.ndim != 1 or e.size < 1:
        raise ValueError("oob_errors must be a non-empty vector")
    if not np.all(np.isfinite(e)):
        raise ValueError("non-finite out-of-bag errors")
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = -temperature * e
    z = z - z.max()
    expz = np.exp(z)
    w = expz / expz.sum()
    names = list(learner_names) if learner_names is not None else [f"m{i}" for i in range(e.size)]
    return EnsembleWeights(weights=w, learner_names=names)


def oob_learner_errors(oob: OobMatrix, relative: bool = True) -> np.ndarray:
    """Per-learner out-of-bag error: RRMSE by default, RMSE when relative=False."""
    errs = np.array([rmse(oob.truth, oob.predictions[:, j]) for j in range(len(oob.learner_names))])
    if relative:
        mean = float(np.mean(oob.truth))
        if mean == 0.0:
            raise ValueError("relative errors undefined: mean truth is zero")
        errs = errs / mean
    return errs


def combine(w: EnsembleWeights, base_predictions: np.ndarray) -> np.ndarray:
    P = np.asarray(base_predictions, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] != w.weights.shape[0]:
        raise ValueError(
            f"predictions have {P.shape[1] if P.ndim == 2 else '?'} columns, "
            f"weights expect {w.weights.shape[0]}"
        )
    return P @ w.weights


def oob_mse(oob: OobMatrix, w: EnsembleWeights) -> float:
    r = oob.truth - combine(w, oob.predictions)
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# Stacked generalization
# ---------------------------------------------------------------------------


def fit_stacked(
    oob: OobMatrix,
    level2: LearnerSpec,
    train,
    base_specs: Sequence[LearnerSpec],
    threads: int = 1,
) -> StackedModel:
    """Fit the level-2 model on OOB predictions and refit bases on full train.

    The OOB matrix must have been generated from base_specs on the same
    training data; base models are refit on all of it for test-time use.
    """
    names = [s.resolved_name for s in base_specs]
    if names != oob.learner_names:
        raise ValueError(f"base specs {names} do not match OOB learners {oob.learner_names}")
    try:
        level2_model = fit_learner(level2, oob.predictions, oob.truth, feature_names=oob.learner_names)
    except Exception as exc:
        raise RuntimeError(f"level-2 learner '{level2.resolved_name}' failed: {exc}") from exc
    base_models = [
        fit_learner(s, train.features, train.response, feature_names=train.feature_names, threads=threads)
        for s in base_specs
    ]
    return StackedModel(base_models=base_models, learner_names=names, level2=level2_model)


def predict_stacked(m: StackedModel, X, feature_names: Optional[List[str]] = None) -> np.ndarray:
    base = np.column_stack([predict(bm, X, feature_names) for bm in m.base_models])
    return predict(m.level2, base, m.learner_names)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_weights(w: EnsembleWeights, path, achieved_oob_mse: Optional[float] = None) -> None:
    if _WEIGHTS_MSE_ROW in w.learner_names:
        raise ValueError(f"learner name '{_WEIGHTS_MSE_ROW}' is reserved")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["learner", "weight"])
        for name, weight in zip(w.learner_names, w.weights):
            writer.writerow([name, repr(float(weight))])
        if achieved_oob_mse is not None:
            writer.writerow([_WEIGHTS_MSE_ROW, repr(float(achieved_oob_mse))])


def read_weights(path) -> Tuple[EnsembleWeights, Optional[float]]:
    names: List[str] = []
    weights: List[float] = []
    achieved: Optional[float] = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["learner", "weight"]:
            raise ValueError(f"unexpected weights header in {path}")
        for rec in reader:
            if rec[0] == _WEIGHTS_MSE_ROW:
                achieved = float(rec[1])
            else:
                names.append(rec[0])
                weights.append(float(rec[1]))
    return EnsembleWeights(weights=np.array(weights), learner_names=names), achieved


def stacked_to_dict(m: StackedModel) -> dict:
    return {
        "format_version": 1,
        "kind": "stacked",
        "learner_names": m.learner_names,
        "base_models": [model_to_dict(bm) for bm in m.base_models],
        "level2": model_to_dict(m.level2),
    }


def stacked_from_dict(doc: dict) -> StackedModel:
    if doc.get("format_version") != 1 or doc.get("kind") != "stacked":
        raise ValueError("not a stacked-model document")
    return StackedModel(
        base_models=[model_from_dict(d) for d in doc["base_models"]],
        learner_names=doc["learner_names"],
        level2=model_from_dict(doc["level2"]),
    )


def save_stacked(m: StackedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stacked_to_dict(m), fh, allow_nan=False, indent=1)
        fh.write("\n")


def load_stacked(path) -> StackedModel:
    with open(path, encoding="utf-8") as fh:
        return stacked_from_dict(json.load(fh))
