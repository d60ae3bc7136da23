import numpy as np
import pytest

from conftest import make_dataset, soil_meta
from yieldcast.dataset import (
    CUTOFF_PRESETS,
    Dataset,
    FeatureCategory,
    FeatureMeta,
    RowKey,
    add_trend_features,
    aggregate_regions,
    apply_scaler,
    apply_weather_cutoff,
    fit_scaler,
    invert_scaler,
    load_table,
    read_areas,
    read_scaler,
    read_trend_models,
    resolve_cutoff,
    split_by_year,
    write_areas,
    write_scaler,
    write_table,
    write_trend_models,
)


def write_csv(path, text):
    path.write_text(text, encoding="utf-8")
    return path


META_TWO = "feature,category,week\nw20_prcp,weather,20\nsoil_ph,soil,\n"


class TestLoadTable:
    def test_three_rows_two_features(self, tmp_path):
        data = write_csv(
            tmp_path / "d.csv",
            "location_id,region_id,state_id,year,yield,w20_prcp,soil_ph\n"
            "c1,d1,s1,2000,100.0,1.5,6.0\n"
            "c1,d1,s1,2001,110.0,2.5,6.0\n"
            "c2,d1,s1,2000,95.0,0.5,6.5\n",
        )
        meta = write_csv(tmp_path / "m.csv", META_TWO)
        d = load_table(data, meta)
        assert d.n_rows == 3
        assert d.n_features == 2
        assert d.rows[2] == RowKey("c2", "d1", "s1", 2000)
        assert d.response.tolist() == [100.0, 110.0, 95.0]

    def test_missing_response_column(self, tmp_path):
        data = write_csv(
            tmp_path / "d.csv",
            "location_id,region_id,state_id,year,w20_prcp,soil_ph\nc1,d1,s1,2000,1.5,6.0\n",
        )
        meta = write_csv(tmp_path / "m.csv", META_TWO)
        with pytest.raises(ValueError, match="missing response column"):
            load_table(data, meta)

    def test_week_metadata_attached(self, tmp_path):
        data = write_csv(
            tmp_path / "d.csv",
            "location_id,region_id,state_id,year,yield,w20_prcp,soil_ph\nc1,d1,s1,2000,1.0,2.0,3.0\n",
        )
        meta = write_csv(tmp_path / "m.csv", META_TWO)
        d = load_table(data, meta)
        by_name = {m.name: m for m in d.feature_meta}
        assert by_name["w20_prcp"].week == 20
        assert by_name["w20_prcp"].category == FeatureCategory.WEATHER
        assert by_name["soil_ph"].week is None

    def test_non_numeric_cell(self, tmp_path):
        data = write_csv(
            tmp_path / "d.csv",
            "location_id,region_id,state_id,year,yield,w20_prcp,soil_ph\nc1,d1,s1,2000,1.0,oops,3.0\n",
        )
        meta = write_csv(tmp_path / "m.csv", META_TWO)
        with pytest.raises(ValueError, match="non-numeric"):
            load_table(data, meta)

    def test_feature_without_metadata(self, tmp_path):
        data = write_csv(
            tmp_path / "d.csv",
            "location_id,region_id,state_id,year,yield,mystery\nc1,d1,s1,2000,1.0,2.0\n",
        )
        meta = write_csv(tmp_path / "m.csv", META_TWO)
        with pytest.raises(ValueError, match="without metadata"):
            load_table(data, meta)

    def test_round_trip_lossless(self, tmp_path, rng):
        X = rng.normal(size=(6, 3)) * 1e3
        y = rng.normal(size=6) * 1e4
        d = make_dataset(X, y, years=[2000, 2000, 2001, 2001, 2002, 2002])
        write_table(d, tmp_path / "d.csv", tmp_path / "m.csv")
        d2 = load_table(tmp_path / "d.csv", tmp_path / "m.csv")
        assert d2.rows == d.rows
        assert np.array_equal(d2.features, d.features)
        assert np.array_equal(d2.response, d.response)
        assert d2.feature_meta == d.feature_meta


class TestDatasetInvariants:
    def test_row_count_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            Dataset(
                rows=[RowKey("a", "r", "s", 2000)],
                features=np.zeros((2, 1)),
                response=np.zeros(2),
                feature_meta=soil_meta(["f0"]),
            )

    def test_duplicate_feature_names(self):
        with pytest.raises(ValueError, match="duplicate"):
            make_dataset(np.zeros((1, 2)), [0.0], names=["f", "f"])

    def test_immutable_arrays(self):
        d = make_dataset(np.zeros((2, 1)), [0.0, 1.0])
        with pytest.raises(ValueError):
            d.features[0, 0] = 5.0
        with pytest.raises(ValueError):
            d.response[0] = 5.0

    def test_week_required_for_weather(self):
        with pytest.raises(ValueError, match="requires a week"):
            FeatureMeta(name="w", category=FeatureCategory.WEATHER)
        with pytest.raises(ValueError, match="must not carry a week"):
            FeatureMeta(name="s", category=FeatureCategory.SOIL, week=10)


class TestScaler:
    def test_linear_map(self):
        d = make_dataset([[2.0], [4.0], [6.0]], [0, 0, 0])
        s = fit_scaler(d)
        assert apply_scaler(d, s).features.ravel().tolist() == [0.0, 0.5, 1.0]

    def test_no_clamping(self):
        train = make_dataset([[2.0], [4.0], [6.0]], [0, 0, 0])
        s = fit_scaler(train)
        test = make_dataset([[8.0]], [0])
        assert apply_scaler(test, s).features[0, 0] == 1.5

    def test_constant_column(self):
        d = make_dataset([[5.0], [5.0]], [0, 0])
        s = fit_scaler(d)
        assert apply_scaler(d, s).features.ravel().tolist() == [0.0, 0.0]

    def test_name_mismatch(self):
        d = make_dataset([[1.0]], [0], names=["a"])
        s = fit_scaler(make_dataset([[1.0]], [0], names=["b"]))
        with pytest.raises(ValueError, match="feature names differ"):
            apply_scaler(d, s)

    def test_range_and_inverse_recovery(self, rng):
        # Training cells land in [0,1]; the inverse map recovers the originals.
        for _ in range(20):
            X = rng.normal(size=(12, 4)) * rng.uniform(0.1, 1e4)
            d = make_dataset(X, np.zeros(12))
            s = fit_scaler(d)
            scaled = apply_scaler(d, s)
            assert scaled.features.min() >= 0.0 and scaled.features.max() <= 1.0
            back = invert_scaler(scaled, s)
            rel = np.abs(back.features - X) / np.maximum(1.0, np.abs(X))
            assert rel.max() < 1e-12

    def test_scaler_file_round_trip(self, tmp_path, rng):
        d = make_dataset(rng.normal(size=(5, 3)), np.zeros(5))
        s = fit_scaler(d)
        write_scaler(s, tmp_path / "s.csv")
        s2 = read_scaler(tmp_path / "s.csv")
        assert s2.feature_names == s.feature_names
        assert np.array_equal(s2.mins, s.mins)
        assert np.array_equal(s2.maxs, s.maxs)


def _trend_pair(train_years, train_yields, test_year, location="locA", state="S0"):
    n = len(train_years)
    train = make_dataset(
        np.zeros((n, 1)), train_yields, years=train_years,
        locations=[location] * n, states=[state] * n,
    )
    test = make_dataset(
        np.zeros((1, 1)), [0.0], years=[test_year], locations=[location], states=[state]
    )
    return train, test


class TestTrendFeatures:
    def test_linear_series_extrapolates(self):
        # (2000,10),(2001,12),(2002,14) -> 2003 prediction 16 by per-location OLS
        train, test = _trend_pair([2000, 2001, 2002], [10.0, 12.0, 14.0], 2003)
        tr, te, models = add_trend_features(train, test)
        assert abs(te.column("yield_trend")[0] - 16.0) < 1e-9
        assert np.allclose(tr.column("yield_trend"), [10.0, 12.0, 14.0], atol=1e-9)

    def test_state_average_compound_growth(self):
        # State annual means 100, 110, 121 -> growth 0.10; 2017 = 121 * 1.1^2
        train, test = _trend_pair([2013, 2014, 2015], [100.0, 110.0, 121.0], 2017)
        _, te, models = add_trend_features(train, test)
        assert abs(te.column("yield_avg")[0] - 146.41) < 1e-9
        assert abs(models.state_growth["S0"] - 0.1) < 1e-12
        assert models.last_train_year == 2015

    def test_single_year_location_falls_back_flat(self):
        train = make_dataset(
            np.zeros((3, 1)), [9.0, 5.0, 7.0], years=[2000, 2000, 2001],
            locations=["solo", "other", "other"],
        )
        test = make_dataset(np.zeros((1, 1)), [0.0], years=[2005], locations=["solo"])
        with pytest.warns(UserWarning, match="single-year"):
            _, te, models = add_trend_features(train, test)
        assert te.column("yield_trend")[0] == 9.0
        assert models.location_slope["solo"] == 0.0

    def test_noiseless_linear_recovery(self, rng):
        # Per-location linear yields are reproduced exactly on train and test.
        for _ in range(10):
            slopes = {f"L{i}": rng.uniform(30, 200) for i in range(4)}
            bases = {f"L{i}": rng.uniform(5000, 9000) for i in range(4)}
            years_tr = list(range(2000, 2010))
            rows, ys = [], []
            for loc in slopes:
                for y in years_tr:
                    rows.append((loc, y))
                    ys.append(bases[loc] + slopes[loc] * (y - 2000))
            train = make_dataset(
                np.zeros((len(rows), 1)), ys,
                years=[r[1] for r in rows], locations=[r[0] for r in rows],
            )
            test_rows = [(loc, 2011) for loc in slopes]
            test = make_dataset(
                np.zeros((4, 1)),
                [bases[loc] + slopes[loc] * 11 for loc, _ in test_rows],
                years=[2011] * 4, locations=[loc for loc, _ in test_rows],
            )
            tr, te, _ = add_trend_features(train, test)
            assert np.max(np.abs(tr.column("yield_trend") - train.response)) < 1e-9
            assert np.max(np.abs(te.column("yield_trend") - test.response)) < 1e-9

    def test_preconditions(self):
        train, test = _trend_pair([2000, 2001], [1.0, 2.0], 2001)
        with pytest.raises(ValueError, match="strictly precede"):
            add_trend_features(train, test)
        train = make_dataset(np.zeros((2, 1)), [1.0, 2.0], years=[2000, 2001], locations=["a", "a"])
        test = make_dataset(np.zeros((1, 1)), [0.0], years=[2002], locations=["b"])
        with pytest.raises(ValueError, match="absent from training"):
            add_trend_features(train, test)

    def test_trend_model_file_round_trip(self, tmp_path):
        train, test = _trend_pair([2000, 2001, 2002], [10.0, 12.0, 14.0], 2003)
        _, _, models = add_trend_features(train, test)
        write_trend_models(models, tmp_path / "t.json")
        m2 = read_trend_models(tmp_path / "t.json")
        assert m2 == models


def _weekly_dataset():
    meta = [
        FeatureMeta(name=f"w{w}", category=FeatureCategory.WEATHER, week=w) for w in range(18, 45)
    ]
    meta.append(FeatureMeta(name="soil_ph", category=FeatureCategory.SOIL))
    meta.append(FeatureMeta(name="plant_pop", category=FeatureCategory.MANAGEMENT))
    meta.append(FeatureMeta(name="prog19", category=FeatureCategory.PLANTING_PROGRESS, week=19))
    meta.append(FeatureMeta(name="prog30", category=FeatureCategory.PLANTING_PROGRESS, week=30))
    meta.append(FeatureMeta(name="yield_trend", category=FeatureCategory.TREND))
    X = np.arange(2 * len(meta), dtype=float).reshape(2, len(meta))
    return make_dataset(X, [1.0, 2.0], meta=meta)


class TestWeatherCutoff:
    def test_drops_late_weeks_keeps_rest(self):
        d = _weekly_dataset()
        out = apply_weather_cutoff(d, 22)
        kept = set(out.feature_names)
        assert {"w18", "w19", "w20", "w21", "w22"}.issubset(kept)
        assert not any(f"w{w}" in kept for w in range(23, 45))
        assert {"soil_ph", "plant_pop", "yield_trend", "prog19"}.issubset(kept)
        assert "prog30" not in kept
        assert out.n_rows == d.n_rows

    def test_cutoff_52_is_identity(self):
        d = _weekly_dataset()
        assert apply_weather_cutoff(d, 52) is d

    def test_presets(self):
        assert CUTOFF_PRESETS == {"june1": 22, "july1": 26, "aug1": 31, "sep1": 35, "oct1": 39}
        assert resolve_cutoff("june1") == 22
        with pytest.raises(ValueError, match="unknown cutoff preset"):
            resolve_cutoff("mayday")

    def test_monotone_in_cutoff(self):
        d = _weekly_dataset()
        previous = set()
        for week in range(18, 53):
            kept = set(apply_weather_cutoff(d, week).feature_names)
            assert previous.issubset(kept)
            previous = kept


class TestSplitByYear:
    def test_paper_style_split(self):
        years = list(range(2000, 2019))
        d = make_dataset(np.zeros((len(years), 1)), np.zeros(len(years)), years=years)
        train, test = split_by_year(d, {2016, 2017, 2018})
        assert train.years == list(range(2000, 2016))
        assert test.years == [2016, 2017, 2018]

    def test_absent_year_errors(self):
        d = make_dataset(np.zeros((3, 1)), np.zeros(3), years=[2000, 2001, 2002])
        with pytest.raises(ValueError, match="not present"):
            split_by_year(d, {2005})

    def test_all_years_is_empty_train(self):
        d = make_dataset(np.zeros((3, 1)), np.zeros(3), years=[2000, 2001, 2002])
        with pytest.raises(ValueError, match="empty train"):
            split_by_year(d, {2000, 2001, 2002})

    def test_partition_preserves_order(self):
        d = make_dataset(
            np.arange(6).reshape(6, 1), np.arange(6.0), years=[2002, 2000, 2001, 2002, 2000, 2001]
        )
        train, test = split_by_year(d, {2002})
        assert [k.year for k in train.rows] == [2000, 2001, 2000, 2001]
        assert train.response.tolist() == [1.0, 2.0, 4.0, 5.0]
        assert test.response.tolist() == [0.0, 3.0]


def _keys(locs, years, region="D0", state="S0"):
    return [RowKey(l, region, state, y) for l, y in zip(locs, years)]


class TestAggregateRegions:
    def test_hand_weighted_mean(self):
        rows = _keys(["c1", "c2"], [2000, 2000])
        out = aggregate_regions(rows, np.array([10.0, 20.0]), {"c1": 1.0, "c2": 3.0}, "district")
        assert out == {("D0", 2000): 17.5}

    def test_single_county_identity(self):
        rows = _keys(["c1"], [2000])
        out = aggregate_regions(rows, np.array([42.0]), {"c1": 7.0}, "district")
        assert out[("D0", 2000)] == 42.0

    def test_equal_areas_is_mean(self):
        rows = _keys(["c1", "c2", "c3"], [2000] * 3)
        out = aggregate_regions(rows, np.array([1.0, 2.0, 6.0]), {c: 5.0 for c in ("c1", "c2", "c3")}, "district")
        assert abs(out[("D0", 2000)] - 3.0) < 1e-12

    def test_invariances(self, rng):
        locs = [f"c{i}" for i in range(6)]
        years = [2000, 2000, 2001, 2001, 2001, 2000]
        rows = _keys(locs, years)
        vals = rng.normal(size=6) * 100
        areas = {c: float(a) for c, a in zip(locs, rng.uniform(1, 10, 6))}
        base = aggregate_regions(rows, vals, areas, "district")
        perm = rng.permutation(6)
        shuffled = aggregate_regions([rows[i] for i in perm], vals[perm], areas, "district")
        for k in base:
            assert abs(base[k] - shuffled[k]) < 1e-9
        doubled = aggregate_regions(rows, 2.0 * vals, areas, "district")
        for k in base:
            assert abs(doubled[k] - 2.0 * base[k]) < 1e-9
        scaled_areas = {c: 7.5 * a for c, a in areas.items()}
        rescaled = aggregate_regions(rows, vals, scaled_areas, "district")
        for k in base:
            assert abs(rescaled[k] - base[k]) < 1e-9

    def test_missing_area_errors(self):
        rows = _keys(["c1"], [2000])
        with pytest.raises(KeyError, match="missing harvested area"):
            aggregate_regions(rows, np.array([1.0]), {}, "district")

    def test_areas_file_round_trip(self, tmp_path):
        areas = {"c1": 10.5, "c2": 3.25}
        write_areas(areas, tmp_path / "a.csv")
        assert read_areas(tmp_path / "a.csv") == areas
