import numpy as np
import pytest

from yieldcast.dataset import Dataset, FeatureCategory, FeatureMeta, RowKey


def soil_meta(names):
    return [FeatureMeta(name=n, category=FeatureCategory.SOIL) for n in names]


def make_dataset(X, y, years=None, locations=None, states=None, names=None, meta=None):
    """Small dataset builder for tests; defaults to soil features and one state."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    years = list(years) if years is not None else [2000 + i for i in range(n)]
    locations = list(locations) if locations is not None else ["locA"] * n
    states = list(states) if states is not None else ["S0"] * n
    rows = [
        RowKey(location_id=loc, region_id=f"{st}-D0", state_id=st, year=yr)
        for loc, st, yr in zip(locations, states, years)
    ]
    if meta is None:
        names = names if names is not None else [f"f{j}" for j in range(X.shape[1])]
        meta = soil_meta(names)
    return Dataset(rows=rows, features=X, response=y, feature_meta=meta)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
