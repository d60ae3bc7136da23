"""Walk-forward folds, blocked sequential out-of-bag generation, and tuning.

Every fold trains on a fixed window of past years and predicts the following
year, so out-of-bag predictions never see the future. Preprocessing (trend
features + scaling) is refit inside each fold by default; a compatibility
switch accepts already-preprocessed data for single-pass reproduction runs.
"""

import csv
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._util import map_ordered, spawn_rng
from .dataset import Dataset, RowKey, add_trend_features, apply_scaler, fit_scaler
from .learners import LearnerSpec, fit_learner, predict


@dataclass(frozen=True)
class Fold:
    train_start: int
    train_end: int  # inclusive
    validation_year: int

    @property
    def train_years(self) -> range:
        return range(self.train_start, self.train_end + 1)


@dataclass
class FoldPlan:
    folds: List[Fold]
    window: int

    def validation_years(self) -> List[int]:
        return [f.validation_year for f in self.folds]


@dataclass
class OobMatrix:
    """Out-of-bag predictions (rows x learners) with aligned truth and keys."""

    predictions: np.ndarray  # [n_oob, k]
    truth: np.ndarray  # [n_oob]
    row_keys: List[RowKey]
    learner_names: List[str]

    def __post_init__(self):
        self.predictions = np.asarray(self.predictions, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        n = len(self.row_keys)
        if self.predictions.shape != (n, len(self.learner_names)):
            raise ValueError(
                f"predictions shape {self.predictions.shape} does not match "
                f"{n} rows x {len(self.learner_names)} learners"
            )
        if self.truth.shape != (n,):
            raise ValueError("truth must align with row_keys")
        if len(set(self.learner_names)) != len(self.learner_names):
            raise ValueError(f"duplicate learner names: {self.learner_names}")


def make_walkforward_folds(years: Sequence[int], window: int = 8) -> FoldPlan:
    """Fixed-window folds: train on W consecutive years, validate on the next.

    Years must be contiguous; every year from first+W through the last becomes
    a validation year exactly once.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    ys = sorted(set(int(y) for y in years))
    if not ys:
        raise ValueError("no years given")
    gaps = [y for y in range(ys[0], ys[-1] + 1) if y not in set(ys)]
    if gaps:
        raise ValueError(f"years must be contiguous; missing {gaps}")
    if len(ys) < window + 1:
        raise ValueError(
            f"need at least window+1 = {window + 1} years, got {len(ys)} ({ys[0]}..{ys[-1]})"
        )
    folds = [
        Fold(train_start=v - window, train_end=v - 1, validation_year=v)
        for v in ys[window:]
    ]
    return FoldPlan(folds=folds, window=window)


def _fold_slices(train: Dataset, fold: Fold) -> Tuple[Dataset, Dataset]:
    window_years = set(fold.train_years)
    fit_idx = [i for i, k in enumerate(train.rows) if k.year in window_years]
    val_idx = [i for i, k in enumerate(train.rows) if k.year == fold.validation_year]
    if not fit_idx:
        raise ValueError(f"fold {fold.validation_year}: no rows in train years {fold.train_start}..{fold.train_end}")
    if not val_idx:
        raise ValueError(f"fold {fold.validation_year}: no rows in validation year")
    return train.subset_rows(fit_idx), train.subset_rows(val_idx)


def prepare_fold(
    train: Dataset,
    fold: Fold,
    refit_preprocessing: bool = True,
    select_fn: Optional[Callable[[Dataset], Dataset]] = None,
) -> Tuple[Dataset, Dataset]:
    """Slice one fold and (by default) refit trend features + scaler on it.

    With refit_preprocessing=False the input is taken as already preprocessed
    (the single-pass behavior) and only sliced. select_fn, when given, maps
    the fold-train dataset to its selected-feature version; the validation
    slice is restricted to the same features.
    """
    fold_train, fold_val = _fold_slices(train, fold)
    if refit_preprocessing:
        fold_train, fold_val, _ = add_trend_features(fold_train, fold_val)
        scaler = fit_scaler(fold_train)
        fold_train = apply_scaler(fold_train, scaler)
        fold_val = apply_scaler(fold_val, scaler)
    if select_fn is not None:
        fold_train = select_fn(fold_train)
        fold_val = fold_val.select_features(fold_train.feature_names)
    return fold_train, fold_val


def generate_oob(
    train: Dataset,
    specs: Sequence[LearnerSpec],
    plan: FoldPlan,
    refit_preprocessing: bool = True,
    select_fn: Optional[Callable[[Dataset], Dataset]] = None,
    threads: int = 1,
    fit_listener: Optional[Callable[[Fold, str, Tuple[int, ...]], None]] = None,
) -> OobMatrix:
    """Blocked sequential procedure: fit each learner per fold, predict the
    validation year, and concatenate across folds in fold order.

    fit_listener, when given, is called as (fold, learner_name, train_years)
    with the years actually present in each fitted slice; tests use it to
    audit that no fit ever saw its validation year.
    """
    if not specs:
        raise ValueError("no learner specs given")
    names = [s.resolved_name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate learner names: {names}")

    def run_fold(fold: Fold):
        fold_train, fold_val = prepare_fold(train, fold, refit_preprocessing, select_fn)
        cols = []
        for spec in specs:
            years_used = tuple(sorted({k.year for k in fold_train.rows}))
            if fit_listener is not None:
                fit_listener(fold, spec.resolved_name, years_used)
            try:
                model = fit_learner(
                    spec, fold_train.features, fold_train.response,
                    feature_names=fold_train.feature_names,
                )
                cols.append(predict(model, fold_val.features, fold_val.feature_names))
            except Exception as exc:
                raise RuntimeError(
                    f"fold {fold.validation_year}: learner '{spec.resolved_name}' failed: {exc}"
                ) from exc
        return fold_val.rows, fold_val.response, np.column_stack(cols)

    results = map_ordered(run_fold, plan.folds, threads)
    row_keys: List[RowKey] = []
    truth_parts, pred_parts = [], []
    for keys, truth, preds in results:
        row_keys.extend(keys)
        truth_parts.append(truth)
        pred_parts.append(preds)
    return OobMatrix(
        predictions=np.vstack(pred_parts),
        truth=np.concatenate(truth_parts),
        row_keys=row_keys,
        learner_names=names,
    )


# ---------------------------------------------------------------------------
# Hyperparameter search
# ---------------------------------------------------------------------------


def _draw(rng: np.random.Generator, domain):
    if isinstance(domain, tuple) and len(domain) == 2:
        lo, hi = domain
        if isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer)):
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(float(lo), float(hi)))
    if isinstance(domain, (set, frozenset)):
        domain = sorted(domain, key=repr)
    if isinstance(domain, (list,)):
        if not domain:
            raise ValueError("empty choice set in search space")
        return domain[int(rng.integers(0, len(domain)))]
    raise ValueError(f"search-space entries must be (min, max) tuples or lists, got {domain!r}")


def tune(
    train: Dataset,
    spec_template: LearnerSpec,
    space: Dict[str, object],
    plan: FoldPlan,
    budget: int,
    seed: int,
    refit_preprocessing: bool = True,
    threads: int = 1,
) -> LearnerSpec:
    """Seeded random search minimizing mean validation MSE across folds.

    Draws `budget` candidates uniformly from the space; the earliest drawn
    candidate wins ties. Fold preprocessing is shared across candidates since
    it does not depend on hyperparameters.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    if not space:
        raise ValueError("empty search space")

    rng = spawn_rng(seed, "tune", spec_template.resolved_name)
    candidates = []
    for _ in range(budget):
        sampled = {name: _draw(rng, domain) for name, domain in space.items()}
        candidates.append(replace(spec_template, hyperparams={**spec_template.hyperparams, **sampled}))

    folds = [
        prepare_fold(train, fold, refit_preprocessing) for fold in plan.folds
    ]

    def evaluate(spec: LearnerSpec) -> float:
        fold_mse = []
        for fold_train, fold_val in folds:
            model = fit_learner(
                spec, fold_train.features, fold_train.response,
                feature_names=fold_train.feature_names,
            )
            err = predict(model, fold_val.features, fold_val.feature_names) - fold_val.response
            fold_mse.append(float(np.mean(err * err)))
        return float(np.mean(fold_mse))

    scores = map_ordered(evaluate, candidates, threads)
    best = 0
    for i in range(1, len(scores)):
        if scores[i] < scores[best]:
            best = i
    return candidates[best]


# ---------------------------------------------------------------------------
# OOB matrix I/O
# ---------------------------------------------------------------------------


def write_oob(oob: OobMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location_id", "region_id", "state_id", "year", "truth"] + oob.learner_names)
        for i, key in enumerate(oob.row_keys):
            writer.writerow(
                [key.location_id, key.region_id, key.state_id, key.year, repr(float(oob.truth[i]))]
                + [repr(float(v)) for v in oob.predictions[i]]
            )


def read_oob(path) -> OobMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        fixed = ["location_id", "region_id", "state_id", "year", "truth"]
        if header[: len(fixed)] != fixed:
            raise ValueError(f"unexpected OOB header in {path}")
        learner_names = header[len(fixed):]
        keys, truth, preds = [], [], []
        for rec in reader:
            keys.append(RowKey(rec[0], rec[1], rec[2], int(rec[3])))
            truth.append(float(rec[4]))
            preds.append([float(v) for v in rec[5:]])
    return OobMatrix(
        predictions=np.array(preds, dtype=np.float64).reshape(len(keys), len(learner_names)),
        truth=np.array(truth),
        row_keys=keys,
        learner_names=learner_names,
    )
