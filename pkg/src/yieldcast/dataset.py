"""Tabular yield data: ingestion, scaling, trend features, slicing, aggregation.

A Dataset is an immutable bundle of row keys (location/region/state/year),
a numeric feature matrix, the yield response (kg/ha), and per-feature
metadata. All operations here are pure functions returning new Datasets.
"""

import csv
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class FeatureCategory(str, Enum):
    WEATHER = "weather"
    SOIL = "soil"
    MANAGEMENT = "management"
    PLANTING_PROGRESS = "planting_progress"
    TREND = "trend"


# Categories whose features carry a week-of-year index.
_WEEKLY = (FeatureCategory.WEATHER, FeatureCategory.PLANTING_PROGRESS)

TREND_FEATURE = "yield_trend"
AVG_FEATURE = "yield_avg"


@dataclass(frozen=True)
class RowKey:
    location_id: str
    region_id: str
    state_id: str
    year: int

    def __post_init__(self):
        if not (self.location_id and self.region_id and self.state_id):
            raise ValueError("row key ids must be non-empty")
        if self.year < 0:
            raise ValueError(f"year must be >= 0, got {self.year}")


@dataclass(frozen=True)
class FeatureMeta:
    name: str
    category: FeatureCategory
    week: Optional[int] = None

    def __post_init__(self):
        if self.category in _WEEKLY:
            if self.week is None:
                raise ValueError(f"feature '{self.name}' ({self.category.value}) requires a week")
            if not 1 <= self.week <= 52:
                raise ValueError(f"feature '{self.name}' week {self.week} outside 1..52")
        elif self.week is not None:
            raise ValueError(f"feature '{self.name}' ({self.category.value}) must not carry a week")


@dataclass
class Dataset:
    rows: List[RowKey]
    features: np.ndarray  # [n_rows, n_features] float64
    response: np.ndarray  # [n_rows] float64, yield in kg/ha
    feature_meta: List[FeatureMeta]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.response = np.asarray(self.response, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = len(self.rows)
        if self.features.shape[0] != n or self.response.shape[0] != n:
            raise ValueError(
                f"row count mismatch: {n} keys, {self.features.shape[0]} feature rows, "
                f"{self.response.shape[0]} responses"
            )
        if self.features.shape[1] != len(self.feature_meta):
            raise ValueError(
                f"{self.features.shape[1]} feature columns but {len(self.feature_meta)} metadata entries"
            )
        names = [m.name for m in self.feature_meta]
        if len(set(names)) != len(names):
            dupes = sorted({x for x in names if names.count(x) > 1})
            raise ValueError(f"duplicate feature names: {dupes}")
        # Immutable after construction; shared across threads without copying.
        self.features.setflags(write=False)
        self.response.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def feature_names(self) -> List[str]:
        return [m.name for m in self.feature_meta]

    @property
    def years(self) -> List[int]:
        return sorted({k.year for k in self.rows})

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self._index_of(name)]

    def _index_of(self, name: str) -> int:
        for i, m in enumerate(self.feature_meta):
            if m.name == name:
                return i
        raise KeyError(f"no feature named '{name}'")

    def subset_rows(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            rows=[self.rows[i] for i in idx],
            features=self.features[idx].copy(),
            response=self.response[idx].copy(),
            feature_meta=list(self.feature_meta),
        )

    def select_features(self, names: Sequence[str]) -> "Dataset":
        """Restrict to the named features, preserving this dataset's column order."""
        wanted = set(names)
        missing = wanted - set(self.feature_names)
        if missing:
            raise KeyError(f"unknown features: {sorted(missing)}")
        keep = [i for i, m in enumerate(self.feature_meta) if m.name in wanted]
        return Dataset(
            rows=list(self.rows),
            features=self.features[:, keep].copy(),
            response=self.response.copy(),
            feature_meta=[self.feature_meta[i] for i in keep],
        )

    def with_features(self, new_meta: List[FeatureMeta], new_columns: np.ndarray) -> "Dataset":
        cols = np.column_stack([self.features, np.asarray(new_columns, dtype=np.float64)])
        return Dataset(
            rows=list(self.rows),
            features=cols,
            response=self.response.copy(),
            feature_meta=list(self.feature_meta) + list(new_meta),
        )


@dataclass
class ScalerParams:
    """Per-feature min/max fitted on training rows only."""

    feature_names: List[str]
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        if not (len(self.feature_names) == self.mins.shape[0] == self.maxs.shape[0]):
            raise ValueError("scaler arrays must match feature name count")
        if np.any(self.maxs < self.mins):
            raise ValueError("scaler max < min")
        self.mins.setflags(write=False)
        self.maxs.setflags(write=False)


@dataclass
class TrendModelSet:
    """Per-location linear trend fits plus per-state baseline and growth rate."""

    location_intercept: Dict[str, float]
    location_slope: Dict[str, float]
    state_baseline: Dict[str, float]  # mean yield at the last training year
    state_growth: Dict[str, float]  # mean relative year-over-year increment
    last_train_year: int
    single_year_locations: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Table I/O
# ---------------------------------------------------------------------------

_KEY_COLUMNS = ["location_id", "region_id", "state_id", "year"]
_RESPONSE_COLUMN = "yield"


def read_feature_meta(meta_path) -> Dict[str, FeatureMeta]:
    """Read the sidecar metadata table: feature,category,week (week may be empty)."""
    metas: Dict[str, FeatureMeta] = {}
    with open(meta_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"feature", "category", "week"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"metadata file must have columns feature,category,week: {meta_path}")
        for rec in reader:
            name = rec["feature"]
            try:
                category = FeatureCategory(rec["category"])
            except ValueError:
                raise ValueError(f"unknown feature category '{rec['category']}' for '{name}'") from None
            week = int(rec["week"]) if rec["week"] not in ("", None) else None
            if name in metas:
                raise ValueError(f"duplicate metadata entry for feature '{name}'")
            metas[name] = FeatureMeta(name=name, category=category, week=week)
    return metas


def load_table(data_path, meta_path) -> Dataset:
    """Load a delimited data table plus its feature-metadata sidecar.

    The data file must have header columns location_id, region_id, state_id,
    year, yield, followed by one column per feature. Every feature column
    must have a metadata entry; missing cells are an error (no imputation).
    """
    metas = read_feature_meta(meta_path)
    with open(data_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty data file: {data_path}") from None
        for col in _KEY_COLUMNS:
            if col not in header:
                raise ValueError(f"missing required column '{col}' in {data_path}")
        if _RESPONSE_COLUMN not in header:
            raise ValueError(f"missing response column '{_RESPONSE_COLUMN}' in {data_path}")
        if len(set(header)) != len(header):
            raise ValueError(f"duplicate columns in {data_path}")
        col_idx = {c: i for i, c in enumerate(header)}
        feature_cols = [c for c in header if c not in _KEY_COLUMNS and c != _RESPONSE_COLUMN]
        unknown = [c for c in feature_cols if c not in metas]
        if unknown:
            raise ValueError(f"feature columns without metadata: {unknown}")

        rows: List[RowKey] = []
        response: List[float] = []
        values: List[List[float]] = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ValueError(f"{data_path}:{lineno}: expected {len(header)} cells, got {len(rec)}")
            rows.append(
                RowKey(
                    location_id=rec[col_idx["location_id"]],
                    region_id=rec[col_idx["region_id"]],
                    state_id=rec[col_idx["state_id"]],
                    year=int(rec[col_idx["year"]]),
                )
            )
            response.append(_parse_cell(rec[col_idx[_RESPONSE_COLUMN]], _RESPONSE_COLUMN, data_path, lineno))
            values.append(
                [_parse_cell(rec[col_idx[c]], c, data_path, lineno) for c in feature_cols]
            )
    features = np.array(values, dtype=np.float64) if values else np.empty((0, len(feature_cols)))
    meta_list = [metas[c] for c in feature_cols]
    return Dataset(rows=rows, features=features, response=np.array(response), feature_meta=meta_list)


def _parse_cell(text: str, column: str, path, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"{path}:{lineno}: non-numeric value '{text}' in column '{column}'") from None
    if not np.isfinite(value):
        raise ValueError(f"{path}:{lineno}: non-finite value in column '{column}'")
    return value


def write_table(d: Dataset, data_path, meta_path) -> None:
    """Write a dataset in the format load_table consumes (lossless floats)."""
    with open(meta_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "category", "week"])
        for m in d.feature_meta:
            writer.writerow([m.name, m.category.value, "" if m.week is None else m.week])
    with open(data_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_KEY_COLUMNS + [_RESPONSE_COLUMN] + d.feature_names)
        for i, key in enumerate(d.rows):
            writer.writerow(
                [key.location_id, key.region_id, key.state_id, key.year, repr(float(d.response[i]))]
                + [repr(float(v)) for v in d.features[i]]
            )


def read_areas(path) -> Dict[str, float]:
    """Read harvested areas: location_id,area."""
    areas: Dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"location_id", "area"}.issubset(reader.fieldnames):
            raise ValueError(f"areas file must have columns location_id,area: {path}")
        for rec in reader:
            areas[rec["location_id"]] = float(rec["area"])
    return areas


def write_areas(areas: Dict[str, float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["location_id", "area"])
        for loc in sorted(areas):
            writer.writerow([loc, repr(float(areas[loc]))])


def write_scaler(s: ScalerParams, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "min", "max"])
        for name, lo, hi in zip(s.feature_names, s.mins, s.maxs):
            writer.writerow([name, repr(float(lo)), repr(float(hi))])


def read_scaler(path) -> ScalerParams:
    names, mins, maxs = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            names.append(rec["feature"])
            mins.append(float(rec["min"]))
            maxs.append(float(rec["max"]))
    return ScalerParams(feature_names=names, mins=np.array(mins), maxs=np.array(maxs))


def write_trend_models(models: TrendModelSet, path) -> None:
    doc = {
        "format_version": 1,
        "location_intercept": models.location_intercept,
        "location_slope": models.location_slope,
        "state_baseline": models.state_baseline,
        "state_growth": models.state_growth,
        "last_train_year": models.last_train_year,
        "single_year_locations": models.single_year_locations,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, allow_nan=False, indent=1, sort_keys=True)
        fh.write("\n")


def read_trend_models(path) -> TrendModelSet:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported trend model format in {path}")
    return TrendModelSet(
        location_intercept=doc["location_intercept"],
        location_slope=doc["location_slope"],
        state_baseline=doc["state_baseline"],
        state_growth=doc["state_growth"],
        last_train_year=doc["last_train_year"],
        single_year_locations=doc["single_year_locations"],
    )


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def fit_scaler(train: Dataset) -> ScalerParams:
    if train.n_rows == 0:
        raise ValueError("cannot fit scaler on empty dataset")
    return ScalerParams(
        feature_names=train.feature_names,
        mins=train.features.min(axis=0),
        maxs=train.features.max(axis=0),
    )


def apply_scaler(d: Dataset, s: ScalerParams) -> Dataset:
    """Map each column through (x - min) / (max - min).

    Constant training columns map to 0. Values outside the training range are
    deliberately not clamped, so covariate shift stays visible to the learners.
    """
    if d.feature_names != s.feature_names:
        raise ValueError("scaler feature names differ from dataset's")
    span = s.maxs - s.mins
    safe = np.where(span > 0, span, 1.0)
    scaled = (d.features - s.mins) / safe
    scaled[:, span == 0] = 0.0
    return Dataset(rows=list(d.rows), features=scaled, response=d.response.copy(), feature_meta=list(d.feature_meta))


def invert_scaler(d: Dataset, s: ScalerParams) -> Dataset:
    """Undo apply_scaler (constant columns return to their training value)."""
    if d.feature_names != s.feature_names:
        raise ValueError("scaler feature names differ from dataset's")
    span = s.maxs - s.mins
    raw = d.features * span + s.mins
    return Dataset(rows=list(d.rows), features=raw, response=d.response.copy(), feature_meta=list(d.feature_meta))


# ---------------------------------------------------------------------------
# Trend features
# ---------------------------------------------------------------------------


def fit_trend_models(train: Dataset) -> TrendModelSet:
    """Fit per-location linear yield trends and per-state baseline/growth.

    Locations with a single training year fall back to a flat trend (slope 0,
    intercept = that yield) with a warning, so sparse counties don't abort.
    """
    if train.n_rows == 0:
        raise ValueError("cannot fit trend models on empty dataset")
    by_location: Dict[str, List[int]] = {}
    for i, key in enumerate(train.rows):
        by_location.setdefault(key.location_id, []).append(i)

    intercepts: Dict[str, float] = {}
    slopes: Dict[str, float] = {}
    single_year: List[str] = []
    for loc in sorted(by_location):
        idx = by_location[loc]
        yrs = np.array([train.rows[i].year for i in idx], dtype=np.float64)
        ys = train.response[idx]
        if len(set(yrs.tolist())) < 2:
            single_year.append(loc)
            slopes[loc] = 0.0
            intercepts[loc] = float(np.mean(ys))
        else:
            b1, b0 = np.polyfit(yrs, ys, deg=1)
            slopes[loc] = float(b1)
            intercepts[loc] = float(b0)
    if single_year:
        warnings.warn(
            f"flat trend fallback for single-year locations: {single_year}", stacklevel=2
        )

    last_year = max(k.year for k in train.rows)
    state_year_mean: Dict[str, Dict[int, float]] = {}
    for state in sorted({k.state_id for k in train.rows}):
        idx = [i for i, k in enumerate(train.rows) if k.state_id == state]
        per_year: Dict[int, float] = {}
        for year in sorted({train.rows[i].year for i in idx}):
            sel = [i for i in idx if train.rows[i].year == year]
            per_year[year] = float(np.mean(train.response[sel]))
        state_year_mean[state] = per_year

    baseline: Dict[str, float] = {}
    growth: Dict[str, float] = {}
    for state, per_year in state_year_mean.items():
        yrs = sorted(per_year)
        baseline[state] = per_year[yrs[-1]]
        increments = [
            per_year[y] / per_year[y - 1] - 1.0
            for y in yrs
            if (y - 1) in per_year and per_year[y - 1] != 0
        ]
        growth[state] = float(np.mean(increments)) if increments else 0.0

    return TrendModelSet(
        location_intercept=intercepts,
        location_slope=slopes,
        state_baseline=baseline,
        state_growth=growth,
        last_train_year=last_year,
        single_year_locations=single_year,
    )


def trend_feature_values(models: TrendModelSet, rows: Sequence[RowKey]) -> np.ndarray:
    """Evaluate (yield_trend, yield_avg) for unseen rows from fitted models.

    yield_avg here is the compounded state baseline; training rows instead get
    the observed per-state annual mean (add_trend_features overrides it).
    """
    out = np.empty((len(rows), 2), dtype=np.float64)
    for i, key in enumerate(rows):
        if key.location_id not in models.location_intercept:
            raise KeyError(f"location '{key.location_id}' absent from training trend models")
        b0 = models.location_intercept[key.location_id]
        b1 = models.location_slope[key.location_id]
        out[i, 0] = b0 + b1 * key.year
        base = models.state_baseline[key.state_id]
        rate = models.state_growth[key.state_id]
        out[i, 1] = base * (1.0 + rate) ** (key.year - models.last_train_year)
    return out


def add_trend_features(train: Dataset, test: Dataset) -> Tuple[Dataset, Dataset, TrendModelSet]:
    """Append yield_trend and yield_avg features to train and test.

    yield_trend is the per-location linear fit (on training yields only)
    evaluated at each row's year. yield_avg is the per-state annual mean yield
    for training rows; test rows get the last training year's state mean
    compounded by the state's mean relative year-over-year growth.
    """
    if train.n_rows == 0 or test.n_rows == 0:
        raise ValueError("train and test must both be non-empty")
    max_train = max(k.year for k in train.rows)
    min_test = min(k.year for k in test.rows)
    if min_test <= max_train:
        raise ValueError(f"train years must strictly precede test years ({max_train} >= {min_test})")
    missing = sorted({k.location_id for k in test.rows} - {k.location_id for k in train.rows})
    if missing:
        raise ValueError(f"test locations absent from training data: {missing}")

    models = fit_trend_models(train)

    train_cols = trend_feature_values(models, train.rows)
    state_year_mean: Dict[Tuple[str, int], float] = {}
    for state in {k.state_id for k in train.rows}:
        for year in {k.year for k in train.rows if k.state_id == state}:
            sel = [i for i, k in enumerate(train.rows) if k.state_id == state and k.year == year]
            state_year_mean[(state, year)] = float(np.mean(train.response[sel]))
    for i, key in enumerate(train.rows):
        train_cols[i, 1] = state_year_mean[(key.state_id, key.year)]

    test_cols = trend_feature_values(models, test.rows)

    meta = [
        FeatureMeta(name=TREND_FEATURE, category=FeatureCategory.TREND),
        FeatureMeta(name=AVG_FEATURE, category=FeatureCategory.TREND),
    ]
    return train.with_features(meta, train_cols), test.with_features(meta, test_cols), models


# ---------------------------------------------------------------------------
# Weather cutoff
# ---------------------------------------------------------------------------

# Day-of-year on a leap-year calendar, rounded to weeks; matches the scenario
# weeks used for first-of-month cutoffs.
_LEAP_CUMULATIVE = [0, 31, 60, 91, 121, 152, 182, 213, 244, 274, 305, 335]
CUTOFF_PRESETS = {
    name: round((_LEAP_CUMULATIVE[month - 1] + 1) / 7)
    for name, month in [("june1", 6), ("july1", 7), ("aug1", 8), ("sep1", 9), ("oct1", 10)]
}


def resolve_cutoff(value) -> int:
    """Turn a week number or a named preset (june1, july1, ...) into a week."""
    if isinstance(value, str):
        if value not in CUTOFF_PRESETS:
            raise ValueError(f"unknown cutoff preset '{value}' (known: {sorted(CUTOFF_PRESETS)})")
        return CUTOFF_PRESETS[value]
    week = int(value)
    if not 1 <= week <= 52:
        raise ValueError(f"cutoff week {week} outside 1..52")
    return week


def apply_weather_cutoff(d: Dataset, cutoff_week: int) -> Dataset:
    """Drop weather and planting-progress features with week > cutoff_week."""
    cutoff_week = resolve_cutoff(cutoff_week)
    keep = [
        m.name
        for m in d.feature_meta
        if not (m.category in _WEEKLY and m.week is not None and m.week > cutoff_week)
    ]
    if len(keep) == d.n_features:
        return d
    return d.select_features(keep)


# ---------------------------------------------------------------------------
# Splitting and aggregation
# ---------------------------------------------------------------------------


def split_by_year(d: Dataset, test_years) -> Tuple[Dataset, Dataset]:
    """Partition rows into (train, test) by year membership, preserving order."""
    test_years = set(int(y) for y in test_years)
    present = set(k.year for k in d.rows)
    absent = sorted(test_years - present)
    if absent:
        raise ValueError(f"test years not present in data: {absent}")
    test_idx = [i for i, k in enumerate(d.rows) if k.year in test_years]
    train_idx = [i for i, k in enumerate(d.rows) if k.year not in test_years]
    if not train_idx:
        raise ValueError("empty train split")
    if not test_idx:
        raise ValueError("empty test split")
    return d.subset_rows(train_idx), d.subset_rows(test_idx)


def aggregate_regions(
    rows: Sequence[RowKey],
    values: np.ndarray,
    areas: Dict[str, float],
    level: str,
) -> Dict[Tuple[str, int], float]:
    """Area-weighted average of county values at district or state level.

    Returns {(region_or_state_id, year): weighted mean}, keys sorted.
    """
    if level not in ("district", "state"):
        raise ValueError(f"level must be 'district' or 'state', got '{level}'")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != len(rows):
        raise ValueError("values length must match rows")
    groups: Dict[Tuple[str, int], List[int]] = {}
    for i, key in enumerate(rows):
        if key.location_id not in areas:
            raise KeyError(f"missing harvested area for location '{key.location_id}'")
        if areas[key.location_id] <= 0:
            raise ValueError(f"non-positive area for location '{key.location_id}'")
        gid = key.region_id if level == "district" else key.state_id
        groups.setdefault((gid, key.year), []).append(i)
    out: Dict[Tuple[str, int], float] = {}
    for gkey in sorted(groups):
        idx = groups[gkey]
        w = np.array([areas[rows[i].location_id] for i in idx], dtype=np.float64)
        out[gkey] = float(np.dot(w, values[idx]) / w.sum())
    return out
