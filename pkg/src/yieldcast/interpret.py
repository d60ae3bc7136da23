"""Partial dependence, dispersion-based importance, and feature selection.

A partial dependence curve sweeps one feature over its training range while
every other column keeps its observed values; the curve's sample standard
deviation ranks features for the weighted ensemble. Feature selection runs in
three stages: a user-supplied drop list, top-m by random-forest permutation
importance, then a pairwise correlation filter. Constructed trend features
are always retained.
"""

import csv
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import spawn_rng
from .dataset import Dataset, FeatureCategory
from .learners import FittedModel, LearnerSpec, fit_learner, tree_predict


@dataclass
class PdpCurve:
    feature: str
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.grid.shape != self.values.shape or self.grid.ndim != 1:
            raise ValueError("grid and values must be equal-length vectors")
        if self.grid.size > 1 and not np.all(np.diff(self.grid) > 0):
            raise ValueError("grid must be strictly increasing")


@dataclass
class ImportanceTable:
    """(feature, score) rows sorted descending; score_kind is 'pdp_sd' or
    'permutation'. Scores are clamped at zero; ranking uses the raw values."""

    entries: List[Tuple[str, float]]
    score_kind: str

    def __post_init__(self):
        if self.score_kind not in ("pdp_sd", "permutation"):
            raise ValueError(f"unknown score kind '{self.score_kind}'")
        scores = [s for _, s in self.entries]
        if any(s < 0 for s in scores):
            raise ValueError("importance scores must be non-negative")
        if scores != sorted(scores, reverse=True):
            raise ValueError("entries must be sorted by descending score")

    @property
    def features(self) -> List[str]:
        return [name for name, _ in self.entries]

    def rank_of(self, name: str) -> int:
        for i, (feat, _) in enumerate(self.entries):
            if feat == name:
                return i
        raise KeyError(f"feature '{name}' not in importance table")


def ranked_table(names: Sequence[str], raw_scores: Sequence[float], kind: str) -> ImportanceTable:
    order = sorted(range(len(names)), key=lambda i: (-raw_scores[i], i))
    return ImportanceTable(
        entries=[(names[i], max(0.0, float(raw_scores[i]))) for i in order],
        score_kind=kind,
    )


# ---------------------------------------------------------------------------
# Partial dependence
# ---------------------------------------------------------------------------


def pdp(
    model_predict: Callable[[np.ndarray], np.ndarray],
    train: Dataset,
    feature: str,
    k_levels: int = 20,
) -> PdpCurve:
    """Average prediction over training rows as one feature sweeps its range.

    The grid is k_levels evenly spaced points between the feature's training
    min and max, or all unique values when there are fewer than k_levels.
    A constant feature yields a single-point curve with a warning.
    """
    if k_levels < 2:
        raise ValueError(f"k_levels must be >= 2, got {k_levels}")
    col = train._index_of(feature)
    values = train.features[:, col]
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        warnings.warn(f"feature '{feature}' is constant; single-point curve", stacklevel=2)
        grid = np.array([lo])
    else:
        unique = np.unique(values)
        grid = unique if unique.size < k_levels else np.linspace(lo, hi, k_levels)
    curve = np.empty(grid.size)
    work = train.features.copy()
    for i, g in enumerate(grid):
        work[:, col] = g
        curve[i] = float(np.mean(model_predict(work)))
    return PdpCurve(feature=feature, grid=grid, values=curve)


def ensemble_pdp(base_curves: Sequence[PdpCurve], w) -> PdpCurve:
    """Pointwise weighted average of base-learner curves on one shared grid."""
    weights = np.asarray(w.weights if hasattr(w, "weights") else w, dtype=np.float64)
    if len(base_curves) != weights.shape[0]:
        raise ValueError(f"{len(base_curves)} curves for {weights.shape[0]} weights")
    first = base_curves[0]
    for c in base_curves[1:]:
        if c.feature != first.feature or not np.array_equal(c.grid, first.grid):
            raise ValueError("base curves must share one feature and grid")
    stacked = np.stack([c.values for c in base_curves])
    return PdpCurve(feature=first.feature, grid=first.grid.copy(), values=weights @ stacked)


def pdp_importance(curve: PdpCurve) -> float:
    """Sample standard deviation of the curve values (k-1 denominator)."""
    if curve.values.size < 2:
        warnings.warn(f"single-point curve for '{curve.feature}'; importance 0", stacklevel=2)
        return 0.0
    return float(np.std(curve.values, ddof=1))


def pdp_importance_table(
    model_predict: Callable[[np.ndarray], np.ndarray],
    train: Dataset,
    k_levels: int = 20,
) -> ImportanceTable:
    scores = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for name in train.feature_names:
            scores.append(pdp_importance(pdp(model_predict, train, name, k_levels)))
    return ranked_table(train.feature_names, scores, "pdp_sd")


# ---------------------------------------------------------------------------
# Permutation importance (random forest, per-tree out-of-bag rows)
# ---------------------------------------------------------------------------


def permutation_deltas(
    model: FittedModel,
    train: Dataset,
    repeats: int = 5,
    seed: int = 0,
) -> Dict[str, np.ndarray]:
    """Raw per-repeat OOB-MSE increases from permuting each column.

    Permutations are seeded per (feature, repeat), so tables are reproducible
    and repeats can run in any order.
    """
    if model.kind != "random_forest" or model.oob_masks is None:
        raise ValueError("permutation importance requires a random forest with OOB bookkeeping")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    X = train.features
    if X.shape[0] != model.oob_masks.shape[1]:
        raise ValueError("dataset rows do not match the model's training rows")
    if model.feature_names is not None and train.feature_names != model.feature_names:
        raise ValueError("dataset features differ from the model's")
    masks = model.oob_masks
    counts = masks.sum(axis=0).astype(np.float64)
    has = counts > 0
    if not has.any():
        raise ValueError("no out-of-bag rows (was the forest fit without bootstrap?)")
    # Per-tree OOB rows, baseline predictions, and the features each tree
    # actually splits on; trees that never touch a column are unaffected by
    # permuting it.
    tree_rows = [np.nonzero(m)[0] for m in masks]
    tree_base = [tree_predict(t, X[rows]) for t, rows in zip(model.trees, tree_rows)]
    tree_uses = [set(int(f) for f in t.feature if f >= 0) for t in model.trees]
    total = np.zeros(X.shape[0])
    for rows, base in zip(tree_rows, tree_base):
        total[rows] += base
    y = train.response
    baseline_pred = total[has] / counts[has]
    baseline = float(np.mean((y[has] - baseline_pred) ** 2))

    out: Dict[str, np.ndarray] = {}
    for j, name in enumerate(train.feature_names):
        affected = [t for t, used in enumerate(tree_uses) if j in used]
        deltas = np.empty(repeats)
        for r in range(repeats):
            if not affected:
                deltas[r] = 0.0
                continue
            rng = spawn_rng(seed, "perm", j, r)
            col = X[rng.permutation(X.shape[0]), j]
            perm_total = total.copy()
            for t in affected:
                rows = tree_rows[t]
                Xp = X[rows].copy()
                Xp[:, j] = col[rows]
                perm_total[rows] += tree_predict(model.trees[t], Xp) - tree_base[t]
            pred = perm_total[has] / counts[has]
            deltas[r] = float(np.mean((y[has] - pred) ** 2)) - baseline
        out[name] = deltas
    return out


def permutation_importance(
    model: FittedModel,
    train: Dataset,
    repeats: int = 5,
    seed: int = 0,
) -> ImportanceTable:
    """Mean OOB-MSE increase per permuted feature, as a ranked table."""
    deltas = permutation_deltas(model, train, repeats, seed)
    raw = [float(np.mean(deltas[name])) for name in train.feature_names]
    return ranked_table(train.feature_names, raw, "permutation")


# ---------------------------------------------------------------------------
# Correlation filter and three-stage selection
# ---------------------------------------------------------------------------


def correlation_filter(
    train: Dataset,
    rank: ImportanceTable,
    threshold: float = 0.9,
    protected: Sequence[str] = (),
) -> List[str]:
    """Keep one feature from each highly correlated pair.

    Pairs are visited by descending |Pearson r|; when |r| > threshold and
    both features are still kept, the lower-ranked one is dropped. Protected
    features are never dropped. Zero-variance columns count as uncorrelated.
    """
    names = train.feature_names
    for name in names:
        rank.rank_of(name)  # pre: rank covers all candidates
    protected = set(protected)
    X = train.features
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(X, rowvar=False)
    corr = np.atleast_2d(corr)
    corr = np.nan_to_num(corr, nan=0.0)
    pairs = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            r = abs(float(corr[i, j]))
            if r > threshold:
                pairs.append((r, i, j))
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    kept = set(names)
    for _, i, j in pairs:
        a, b = names[i], names[j]
        if a not in kept or b not in kept:
            continue
        a_prot, b_prot = a in protected, b in protected
        if a_prot and b_prot:
            continue
        if a_prot:
            kept.discard(b)
        elif b_prot:
            kept.discard(a)
        elif rank.rank_of(a) <= rank.rank_of(b):
            kept.discard(b)
        else:
            kept.discard(a)
    return [n for n in names if n in kept]


def select_features(
    train: Dataset,
    drop_list: Sequence[str] = (),
    m: int = 80,
    threshold: float = 0.9,
    forest_spec: Optional[LearnerSpec] = None,
    seed: int = 0,
    repeats: int = 5,
    threads: int = 1,
) -> Tuple[Dataset, ImportanceTable]:
    """Three-stage selection: drop list, top-m permutation importance,
    correlation filter. Trend features survive every stage.

    Returns the reduced training dataset and the stage-2 importance table
    over all post-drop features.
    """
    trend_names = [m_.name for m_ in train.feature_meta if m_.category == FeatureCategory.TREND]
    unknown = [n for n in drop_list if n not in train.feature_names]
    if unknown:
        raise ValueError(f"drop_list names not in dataset: {unknown}")
    dropped_trend = [n for n in drop_list if n in trend_names]
    if dropped_trend:
        raise ValueError(f"constructed trend features cannot be dropped: {dropped_trend}")
    survivors = [n for n in train.feature_names if n not in set(drop_list)]
    stage1 = train.select_features(survivors)

    if forest_spec is None:
        forest_spec = LearnerSpec(kind="random_forest", hyperparams={"n_trees": 50}, seed=seed)
    if forest_spec.kind != "random_forest":
        raise ValueError("feature selection requires a random_forest spec")
    forest = fit_learner(
        forest_spec, stage1.features, stage1.response,
        feature_names=stage1.feature_names, threads=threads,
    )
    table = permutation_importance(forest, stage1, repeats=repeats, seed=seed)

    non_trend = [n for n in table.features if n not in trend_names]
    if m > len(non_trend):
        warnings.warn(
            f"m={m} exceeds the {len(non_trend)} selectable features; keeping all", stacklevel=2
        )
    top = set(non_trend[: min(m, len(non_trend))]) | set(trend_names)
    stage2 = stage1.select_features([n for n in stage1.feature_names if n in top])

    kept = correlation_filter(stage2, table, threshold=threshold, protected=trend_names)
    return stage2.select_features(kept), table


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_pdp_curves(curves: Sequence[PdpCurve], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "grid_value", "pdp_value"])
        for c in curves:
            for g, v in zip(c.grid, c.values):
                writer.writerow([c.feature, repr(float(g)), repr(float(v))])


def read_pdp_curves(path) -> List[PdpCurve]:
    grids: Dict[str, List[float]] = {}
    vals: Dict[str, List[float]] = {}
    order: List[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            name = rec["feature"]
            if name not in grids:
                grids[name] = []
                vals[name] = []
                order.append(name)
            grids[name].append(float(rec["grid_value"]))
            vals[name].append(float(rec["pdp_value"]))
    return [PdpCurve(feature=n, grid=np.array(grids[n]), values=np.array(vals[n])) for n in order]


def write_importance_table(table: ImportanceTable, path, weeks: Optional[Dict[str, Optional[int]]] = None) -> None:
    """Write rank,feature,week,importance (week blank where inapplicable)."""
    weeks = weeks or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "feature", "week", "importance"])
        for i, (name, score) in enumerate(table.entries, start=1):
            week = weeks.get(name)
            writer.writerow([i, name, "" if week is None else week, repr(float(score))])


def read_importance_table(path, score_kind: str = "pdp_sd") -> ImportanceTable:
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            entries.append((rec["feature"], float(rec["importance"])))
    return ImportanceTable(entries=entries, score_kind=score_kind)
