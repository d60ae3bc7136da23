"""Seeded synthetic yield data with planted structure.

Every generated dataset has a known per-location linear trend, known linear
weather effects, and Gaussian noise, so each pipeline stage can be checked
against ground truth.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ._util import spawn_rng
from .dataset import Dataset, FeatureCategory, FeatureMeta, RowKey


@dataclass(frozen=True)
class PlantedEffect:
    name: str
    week: int
    coefficient: float


@dataclass
class SynthConfig:
    n_locations: int = 20
    n_states: int = 2
    year_start: int = 2000
    year_end: int = 2013
    noise_sd: float = 300.0  # kg/ha
    base_range: Tuple[float, float] = (8000.0, 12000.0)
    slope_range: Tuple[float, float] = (50.0, 150.0)  # kg/ha/year
    effects: List[PlantedEffect] = field(default_factory=list)
    n_noise_features: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.year_end - self.year_start + 1 < 10:
            raise ValueError("year range must span at least 10 years")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.n_locations < 1 or self.n_states < 1:
            raise ValueError("need at least one location and one state")

    @property
    def years(self) -> range:
        return range(self.year_start, self.year_end + 1)


@dataclass
class GroundTruth:
    location_intercept: Dict[str, float]  # yield level at year_start
    location_slope: Dict[str, float]
    effects: Dict[str, float]
    noise_sd: float
    year_start: int


_NOISE_WEEKS = list(range(18, 45))


def generate(cfg: SynthConfig) -> Tuple[Dataset, GroundTruth]:
    """Generate yields = location trend + planted effects + Gaussian noise.

    Weather features are Uniform(0,1), drawn independently per (location,
    year). Rows are ordered year-major then location index; everything is a
    pure function of the seed.
    """
    rng = spawn_rng(cfg.seed, "synth")
    locations = [f"loc{i:03d}" for i in range(cfg.n_locations)]
    states = {loc: f"S{i % cfg.n_states}" for i, loc in enumerate(locations)}
    # Two districts per state, nested so regional aggregation is meaningful.
    regions = {
        loc: f"{states[loc]}-D{(i // cfg.n_states) % 2}" for i, loc in enumerate(locations)
    }

    intercepts = {
        loc: float(v) for loc, v in zip(locations, rng.uniform(*cfg.base_range, cfg.n_locations))
    }
    slopes = {
        loc: float(v) for loc, v in zip(locations, rng.uniform(*cfg.slope_range, cfg.n_locations))
    }

    meta: List[FeatureMeta] = []
    coefs: List[float] = []
    seen = set()
    for eff in cfg.effects:
        if eff.name in seen:
            raise ValueError(f"duplicate planted effect name '{eff.name}'")
        seen.add(eff.name)
        meta.append(FeatureMeta(name=eff.name, category=FeatureCategory.WEATHER, week=eff.week))
        coefs.append(eff.coefficient)
    for i in range(cfg.n_noise_features):
        name = f"noise_f{i:02d}"
        if name in seen:
            raise ValueError(f"planted effect name collides with '{name}'")
        week = _NOISE_WEEKS[i % len(_NOISE_WEEKS)]
        meta.append(FeatureMeta(name=name, category=FeatureCategory.WEATHER, week=week))
        coefs.append(0.0)
    coef_vec = np.array(coefs)

    rows: List[RowKey] = []
    for year in cfg.years:
        for loc in locations:
            rows.append(RowKey(location_id=loc, region_id=regions[loc], state_id=states[loc], year=year))
    n = len(rows)
    features = rng.uniform(0.0, 1.0, size=(n, len(meta)))
    noise = rng.normal(0.0, cfg.noise_sd, size=n) if cfg.noise_sd > 0 else np.zeros(n)

    trend = np.array(
        [intercepts[k.location_id] + slopes[k.location_id] * (k.year - cfg.year_start) for k in rows]
    )
    response = trend + features @ coef_vec + noise

    dataset = Dataset(rows=rows, features=features, response=response, feature_meta=meta)
    truth = GroundTruth(
        location_intercept=intercepts,
        location_slope=slopes,
        effects={e.name: e.coefficient for e in cfg.effects},
        noise_sd=cfg.noise_sd,
        year_start=cfg.year_start,
    )
    return dataset, truth


def default_areas(dataset: Dataset, cfg: SynthConfig) -> Dict[str, float]:
    """Deterministic harvested areas for aggregation tests and CLI runs."""
    rng = spawn_rng(cfg.seed, "areas")
    locations = sorted({k.location_id for k in dataset.rows})
    return {loc: float(v) for loc, v in zip(locations, rng.uniform(100.0, 1000.0, len(locations)))}
