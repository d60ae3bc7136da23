"""Batch pipeline stages behind the CLI.

Stages communicate only through files under the configured output directory,
so any stage can be rerun in isolation and the blocked out-of-bag procedure
stays auditable. All writes are atomic (temp file + rename) and every stage
is a pure function of (input files, config, seed).
"""

import csv
import json
import os
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import dataset as ds
from . import ensemble as ens
from . import interpret as itp
from . import metrics as mx
from . import validation as val
from .config import RunConfig
from .learners import FittedModel, LearnerSpec, fit_learner, predict

# Artifact names under paths.output_dir.
GROUND_TRUTH = "ground_truth.json"
PREPARED_TRAIN = "prepared_train.csv"
PREPARED_TRAIN_META = "prepared_train_meta.csv"
PREPARED_TEST = "prepared_test.csv"
PREPARED_TEST_META = "prepared_test_meta.csv"
SELECTED_TRAIN_RAW = "selected_train_raw.csv"
SELECTED_TRAIN_RAW_META = "selected_train_raw_meta.csv"
SELECTED_TEST_RAW = "selected_test_raw.csv"
SELECTED_TEST_RAW_META = "selected_test_raw_meta.csv"
SCALER = "scaler.csv"
TREND_MODEL = "trend_model.json"
SELECTION_IMPORTANCE = "selection_importance.csv"
TUNED_SPECS = "tuned_specs.json"
OOB = "oob.csv"
PREDICTIONS = "predictions.csv"
PDP_CURVES = "pdp_curves.csv"
PDP_IMPORTANCE = "importance_pdp.csv"


def _atomic_write(path: Path, write_fn: Callable[[Path], None]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)
    return path


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.paths.output_dir) / name


def _require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise RuntimeError(f"missing {path}; run `yieldcast {hint}` first")
    return Path(path)


def weights_file(kind: str) -> str:
    return f"weights_{kind}.csv"


def stacked_file(kind: str) -> str:
    return f"{kind}.json"


def cutoff_label(entry) -> str:
    if entry is None:
        return "full"
    return f"wk{ds.resolve_cutoff(entry):02d}"


# ---------------------------------------------------------------------------
# Stage: simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> List[Path]:
    """Write synthetic data/metadata/areas files in load_table's format."""
    import dataclasses

    from . import synth
    from .config import derive_seed

    if cfg.synth is None:
        raise ValueError("config has no `synth` section")
    # The generator seed folds in the run seed so --seed reruns new data.
    synth_cfg = dataclasses.replace(cfg.synth, seed=derive_seed(cfg.seed, "synth", cfg.synth.seed))
    data, truth = synth.generate(synth_cfg)
    areas = synth.default_areas(data, synth_cfg)

    written = []
    data_path = Path(cfg.paths.data)
    meta_path = Path(cfg.paths.metadata)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_data = data_path.with_name(data_path.name + ".tmp")
    tmp_meta = meta_path.with_name(meta_path.name + ".tmp")
    ds.write_table(data, tmp_data, tmp_meta)
    os.replace(tmp_data, data_path)
    os.replace(tmp_meta, meta_path)
    written += [data_path, meta_path]
    if cfg.paths.areas is not None:
        written.append(_atomic_write(cfg.paths.areas, lambda p: ds.write_areas(areas, p)))

    doc = {
        "format_version": 1,
        "location_intercept": truth.location_intercept,
        "location_slope": truth.location_slope,
        "effects": truth.effects,
        "noise_sd": truth.noise_sd,
        "year_start": truth.year_start,
    }
    written.append(
        _atomic_write(
            _out(cfg, GROUND_TRUTH),
            lambda p: Path(p).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n"),
        )
    )
    return written


# ---------------------------------------------------------------------------
# Stage: prepare
# ---------------------------------------------------------------------------


def _forest_spec_for_selection(cfg: RunConfig) -> LearnerSpec:
    from .config import derive_seed

    return LearnerSpec(
        kind="random_forest",
        hyperparams=dict(cfg.feature_selection.forest),
        seed=derive_seed(cfg.seed, "selection_forest"),
        name="selection_forest",
    )


def cmd_prepare(cfg: RunConfig) -> List[Path]:
    """Ingest, split, add trend features, scale, select features; write the
    prepared datasets plus scaler/trend-model/importance artifacts."""
    full = ds.load_table(_require(cfg.paths.data, "simulate (or point paths.data at real data)"), cfg.paths.metadata)
    if cfg.weather_cutoff is not None:
        full = ds.apply_weather_cutoff(full, ds.resolve_cutoff(cfg.weather_cutoff))
    if not cfg.test_years:
        raise ValueError("config.test_years is empty")
    train_raw, test_raw = ds.split_by_year(full, cfg.test_years)

    train_t, test_t, trend_models = ds.add_trend_features(train_raw, test_raw)
    scaler = ds.fit_scaler(train_t)
    train_s = ds.apply_scaler(train_t, scaler)
    test_s = ds.apply_scaler(test_t, scaler)

    sel = cfg.feature_selection
    if sel.enabled:
        train_sel, table = itp.select_features(
            train_s,
            drop_list=sel.drop,
            m=sel.top_m,
            threshold=sel.correlation_threshold,
            forest_spec=_forest_spec_for_selection(cfg),
            seed=cfg.seed,
            repeats=sel.permutation_repeats,
            threads=cfg.threads,
        )
        test_sel = test_s.select_features(train_sel.feature_names)
    else:
        train_sel, test_sel = train_s, test_s
        table = None

    raw_names = [n for n in train_sel.feature_names if n not in (ds.TREND_FEATURE, ds.AVG_FEATURE)]
    train_raw_sel = train_raw.select_features(raw_names)
    test_raw_sel = test_raw.select_features(raw_names)

    written = []
    for name_data, name_meta, d in [
        (PREPARED_TRAIN, PREPARED_TRAIN_META, train_sel),
        (PREPARED_TEST, PREPARED_TEST_META, test_sel),
        (SELECTED_TRAIN_RAW, SELECTED_TRAIN_RAW_META, train_raw_sel),
        (SELECTED_TEST_RAW, SELECTED_TEST_RAW_META, test_raw_sel),
    ]:
        data_path, meta_path = _out(cfg, name_data), _out(cfg, name_meta)
        data_path.parent.mkdir(parents=True, exist_ok=True)
        tmp_d = data_path.with_name(data_path.name + ".tmp")
        tmp_m = meta_path.with_name(meta_path.name + ".tmp")
        ds.write_table(d, tmp_d, tmp_m)
        os.replace(tmp_d, data_path)
        os.replace(tmp_m, meta_path)
        written += [data_path, meta_path]

    written.append(_atomic_write(_out(cfg, SCALER), lambda p: ds.write_scaler(scaler, p)))
    written.append(_atomic_write(_out(cfg, TREND_MODEL), lambda p: ds.write_trend_models(trend_models, p)))
    if table is not None:
        weeks = {m.name: m.week for m in train_s.feature_meta}
        written.append(
            _atomic_write(
                _out(cfg, SELECTION_IMPORTANCE),
                lambda p: itp.write_importance_table(table, p, weeks=weeks),
            )
        )
    return written


# ---------------------------------------------------------------------------
# Shared stage plumbing
# ---------------------------------------------------------------------------


def _load_pair(cfg: RunConfig, data_name: str, meta_name: str, hint: str) -> ds.Dataset:
    return ds.load_table(_require(_out(cfg, data_name), hint), _require(_out(cfg, meta_name), hint))


def _oob_base_dataset(cfg: RunConfig) -> Tuple[ds.Dataset, bool]:
    """Dataset and refit flag for fold-based work (OOB generation, tuning).

    Default: raw selected features, preprocessing refit inside each fold.
    Compat: the globally preprocessed training set, used as-is (paper-literal
    single-pass preprocessing).
    """
    if cfg.compat_paper_preprocessing:
        return _load_pair(cfg, PREPARED_TRAIN, PREPARED_TRAIN_META, "prepare"), False
    return _load_pair(cfg, SELECTED_TRAIN_RAW, SELECTED_TRAIN_RAW_META, "prepare"), True


def _select_fn(cfg: RunConfig) -> Optional[Callable[[ds.Dataset], ds.Dataset]]:
    sel = cfg.feature_selection
    if not (sel.enabled and sel.per_fold):
        return None
    spec = _forest_spec_for_selection(cfg)

    def run(fold_train: ds.Dataset) -> ds.Dataset:
        reduced, _ = itp.select_features(
            fold_train,
            drop_list=sel.drop,
            m=sel.top_m,
            threshold=sel.correlation_threshold,
            forest_spec=spec,
            seed=cfg.seed,
            repeats=sel.permutation_repeats,
            threads=1,
        )
        return reduced

    return run


def _current_specs(cfg: RunConfig) -> List[LearnerSpec]:
    """Config specs, overridden by tuned_specs.json when it exists."""
    specs = cfg.learner_specs()
    tuned_path = _out(cfg, TUNED_SPECS)
    if tuned_path.exists():
        with open(tuned_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        tuned = {
            entry["name"]: LearnerSpec(
                kind=entry["kind"], hyperparams=entry["hyperparams"],
                seed=entry["seed"], name=entry["name"],
            )
            for entry in doc["specs"]
        }
        specs = [tuned.get(s.resolved_name, s) for s in specs]
    return specs


def _plan(cfg: RunConfig, train: ds.Dataset) -> val.FoldPlan:
    return val.make_walkforward_folds(train.years, window=cfg.window)


# ---------------------------------------------------------------------------
# Stage: tune
# ---------------------------------------------------------------------------


def cmd_tune(cfg: RunConfig) -> List[Path]:
    """Walk-forward random search for every learner that declares a space."""
    train, refit = _oob_base_dataset(cfg)
    plan = _plan(cfg, train)
    specs = cfg.learner_specs()
    by_name = {lc.name: lc for lc in cfg.learners}
    out = []
    for spec in specs:
        space = by_name[spec.resolved_name].space
        if space:
            spec = val.tune(
                train, spec, space, plan,
                budget=cfg.tuning_budget, seed=cfg.seed,
                refit_preprocessing=refit, threads=cfg.threads,
            )
        out.append(spec)
    doc = {
        "format_version": 1,
        "specs": [
            {"name": s.resolved_name, "kind": s.kind, "hyperparams": s.hyperparams, "seed": s.seed}
            for s in out
        ],
    }
    return [
        _atomic_write(
            _out(cfg, TUNED_SPECS),
            lambda p: Path(p).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n"),
        )
    ]


# ---------------------------------------------------------------------------
# Stage: oob
# ---------------------------------------------------------------------------


def cmd_oob(cfg: RunConfig) -> List[Path]:
    """Blocked sequential out-of-bag predictions for all configured learners."""
    train, refit = _oob_base_dataset(cfg)
    plan = _plan(cfg, train)
    oob = val.generate_oob(
        train, _current_specs(cfg), plan,
        refit_preprocessing=refit, select_fn=_select_fn(cfg), threads=cfg.threads,
    )
    return [_atomic_write(_out(cfg, OOB), lambda p: val.write_oob(oob, p))]


# ---------------------------------------------------------------------------
# Stage: ensemble
# ---------------------------------------------------------------------------


def _weight_ensembles(cfg: RunConfig, oob: val.OobMatrix) -> Dict[str, ens.EnsembleWeights]:
    out = {}
    for kind in cfg.ensembles:
        if kind == "optimal":
            out[kind] = ens.solve_optimal_weights(oob)
        elif kind == "average":
            out[kind] = ens.average_weights(len(oob.learner_names), oob.learner_names)
        elif kind == "ewa":
            errors = ens.oob_learner_errors(oob, relative=not cfg.ewa_raw_errors)
            out[kind] = ens.ewa_weights(errors, cfg.ewa_temperature, oob.learner_names)
    return out


def cmd_ensemble(cfg: RunConfig) -> List[Path]:
    """Solve/construct ensemble weights and fit stacked models from the OOB
    matrix; bases for stacking are refit on the full prepared training set."""
    oob = val.read_oob(_require(_out(cfg, OOB), "oob"))
    written = []
    for kind, w in _weight_ensembles(cfg, oob).items():
        written.append(
            _atomic_write(
                _out(cfg, weights_file(kind)),
                lambda p, w=w: ens.write_weights(w, p, achieved_oob_mse=ens.oob_mse(oob, w)),
            )
        )
    stacked_kinds = [k for k in cfg.ensembles if k.startswith("stacked_")]
    if stacked_kinds:
        train = _load_pair(cfg, PREPARED_TRAIN, PREPARED_TRAIN_META, "prepare")
        specs = _current_specs(cfg)
        for kind in stacked_kinds:
            model = ens.fit_stacked(oob, cfg.level2_spec(kind), train, specs, threads=cfg.threads)
            written.append(
                _atomic_write(_out(cfg, stacked_file(kind)), lambda p, m=model: ens.save_stacked(m, p))
            )
    return written


# ---------------------------------------------------------------------------
# Stage: forecast
# ---------------------------------------------------------------------------


def write_predictions(
    rows: Sequence[ds.RowKey], truth: np.ndarray, columns: Dict[str, np.ndarray], path
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        names = list(columns)
        writer.writerow(["location_id", "region_id", "state_id", "year", "truth"] + names)
        for i, key in enumerate(rows):
            writer.writerow(
                [key.location_id, key.region_id, key.state_id, key.year, repr(float(truth[i]))]
                + [repr(float(columns[n][i])) for n in names]
            )


def read_predictions(path) -> Tuple[List[ds.RowKey], np.ndarray, Dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        fixed = ["location_id", "region_id", "state_id", "year", "truth"]
        if header[: len(fixed)] != fixed:
            raise ValueError(f"unexpected predictions header in {path}")
        names = header[len(fixed):]
        rows, truth, cols = [], [], {n: [] for n in names}
        for rec in reader:
            rows.append(ds.RowKey(rec[0], rec[1], rec[2], int(rec[3])))
            truth.append(float(rec[4]))
            for j, n in enumerate(names):
                cols[n].append(float(rec[5 + j]))
    return rows, np.array(truth), {n: np.array(v) for n, v in cols.items()}


def _fit_bases(
    specs: Sequence[LearnerSpec], train: ds.Dataset, threads: int
) -> Dict[str, FittedModel]:
    return {
        s.resolved_name: fit_learner(
            s, train.features, train.response, feature_names=train.feature_names, threads=threads
        )
        for s in specs
    }


def _scenario_predictions(
    cfg: RunConfig,
    specs: Sequence[LearnerSpec],
    train_prep: ds.Dataset,
    test_prep: ds.Dataset,
    fold_base: ds.Dataset,
    refit: bool,
) -> Dict[str, np.ndarray]:
    """Self-contained forecast for one weather scenario: regenerate the OOB
    matrix, rebuild every configured ensemble, refit bases, predict the test
    years."""
    plan = _plan(cfg, fold_base)
    oob = val.generate_oob(
        fold_base, specs, plan, refit_preprocessing=refit,
        select_fn=None, threads=cfg.threads,
    )
    bases = _fit_bases(specs, train_prep, cfg.threads)
    base_preds = {
        name: predict(m, test_prep.features, test_prep.feature_names) for name, m in bases.items()
    }
    base_matrix = np.column_stack([base_preds[s.resolved_name] for s in specs])
    columns = dict(base_preds)
    for kind, w in _weight_ensembles(cfg, oob).items():
        columns[kind] = ens.combine(w, base_matrix)
    for kind in cfg.ensembles:
        if kind.startswith("stacked_"):
            model = ens.fit_stacked(oob, cfg.level2_spec(kind), train_prep, specs, threads=cfg.threads)
            columns[kind] = ens.predict_stacked(model, test_prep.features, test_prep.feature_names)
    return columns


def cmd_forecast(cfg: RunConfig) -> List[Path]:
    """Refit bases on the full training set and predict the test years with
    every configured ensemble; optionally sweep weather-cutoff scenarios."""
    train_prep = _load_pair(cfg, PREPARED_TRAIN, PREPARED_TRAIN_META, "prepare")
    test_prep = _load_pair(cfg, PREPARED_TEST, PREPARED_TEST_META, "prepare")
    specs = _current_specs(cfg)

    bases = _fit_bases(specs, train_prep, cfg.threads)
    base_preds = {
        name: predict(m, test_prep.features, test_prep.feature_names) for name, m in bases.items()
    }
    base_matrix = np.column_stack([base_preds[s.resolved_name] for s in specs])
    columns = dict(base_preds)
    for kind in cfg.ensembles:
        if kind.startswith("stacked_"):
            model = ens.load_stacked(_require(_out(cfg, stacked_file(kind)), "ensemble"))
            columns[kind] = ens.predict_stacked(model, test_prep.features, test_prep.feature_names)
        else:
            w, _ = ens.read_weights(_require(_out(cfg, weights_file(kind)), "ensemble"))
            if w.learner_names != [s.resolved_name for s in specs]:
                raise RuntimeError("weights file learners do not match configured learners; rerun ensemble")
            columns[kind] = ens.combine(w, base_matrix)

    written = [
        _atomic_write(
            _out(cfg, PREDICTIONS),
            lambda p: write_predictions(test_prep.rows, test_prep.response, columns, p),
        )
    ]

    if cfg.cutoff_sweep:
        fold_base, refit = _oob_base_dataset(cfg)
        for entry in cfg.cutoff_sweep:
            label = cutoff_label(entry)
            if entry is None:
                tr, te, fb = train_prep, test_prep, fold_base
            else:
                week = ds.resolve_cutoff(entry)
                tr = ds.apply_weather_cutoff(train_prep, week)
                te = ds.apply_weather_cutoff(test_prep, week)
                fb = ds.apply_weather_cutoff(fold_base, week)
            cols = _scenario_predictions(cfg, specs, tr, te, fb, refit)
            written.append(
                _atomic_write(
                    _out(cfg, f"predictions_cutoff_{label}.csv"),
                    lambda p, c=cols, t=te: write_predictions(t.rows, t.response, c, p),
                )
            )
    return written


# ---------------------------------------------------------------------------
# Stage: evaluate
# ---------------------------------------------------------------------------


def _model_reports(
    rows: Sequence[ds.RowKey],
    truth: np.ndarray,
    columns: Dict[str, np.ndarray],
    anchor: bool,
) -> List[mx.MetricsReport]:
    out = []
    for name, pred in columns.items():
        r = mx.report(rows, truth, pred, grouping="overall", anchor_prev_truth=anchor)[0]
        r.group = name
        out.append(r)
    return out


def _aggregated_reports(
    rows: Sequence[ds.RowKey],
    truth: np.ndarray,
    columns: Dict[str, np.ndarray],
    areas: Dict[str, float],
    level: str,
    anchor: bool,
) -> List[mx.MetricsReport]:
    agg_truth = ds.aggregate_regions(rows, truth, areas, level)
    keys = list(agg_truth)
    pseudo_rows = [ds.RowKey(gid, gid, gid, year) for gid, year in keys]
    t = np.array([agg_truth[k] for k in keys])
    out = []
    for name, pred in columns.items():
        agg_pred = ds.aggregate_regions(rows, pred, areas, level)
        p = np.array([agg_pred[k] for k in keys])
        r = mx.report(pseudo_rows, t, p, grouping="overall", anchor_prev_truth=anchor)[0]
        r.group = name
        out.append(r)
    return out


def cmd_evaluate(cfg: RunConfig) -> List[Path]:
    """County/district/state reports per model from the predictions files."""
    rows, truth, columns = read_predictions(_require(_out(cfg, PREDICTIONS), "forecast"))
    anchor = cfg.mda_anchor_truth
    written = []

    county = _model_reports(rows, truth, columns, anchor)
    written.append(_atomic_write(_out(cfg, "report_county.csv"), lambda p: mx.write_report_csv(county, p)))
    written.append(_atomic_write(_out(cfg, "report_county.json"), lambda p: mx.write_report_json(county, p)))

    by_year = []
    for name, pred in columns.items():
        for r in mx.report(rows, truth, pred, grouping="year", anchor_prev_truth=anchor):
            r.group = f"{name}/{r.group}"
            by_year.append(r)
    written.append(
        _atomic_write(_out(cfg, "report_county_by_year.csv"), lambda p: mx.write_report_csv(by_year, p))
    )

    if cfg.paths.areas is not None and Path(cfg.paths.areas).exists():
        areas = ds.read_areas(cfg.paths.areas)
        for level, fname in [("district", "report_district"), ("state", "report_state")]:
            reports = _aggregated_reports(rows, truth, columns, areas, level, anchor)
            written.append(_atomic_write(_out(cfg, f"{fname}.csv"), lambda p, r=reports: mx.write_report_csv(r, p)))
            written.append(_atomic_write(_out(cfg, f"{fname}.json"), lambda p, r=reports: mx.write_report_json(r, p)))

    for entry in cfg.cutoff_sweep:
        label = cutoff_label(entry)
        path = _out(cfg, f"predictions_cutoff_{label}.csv")
        if path.exists():
            s_rows, s_truth, s_cols = read_predictions(path)
            reports = _model_reports(s_rows, s_truth, s_cols, anchor)
            written.append(
                _atomic_write(
                    _out(cfg, f"report_cutoff_{label}.csv"),
                    lambda p, r=reports: mx.write_report_csv(r, p),
                )
            )
    return written


# ---------------------------------------------------------------------------
# Stage: interpret
# ---------------------------------------------------------------------------


def cmd_interpret(cfg: RunConfig) -> List[Path]:
    """Ensemble partial dependence curves and dispersion-based importance.

    The ensemble curve for each feature is the optimal-weight average of the
    base learners' curves; its sample standard deviation ranks the features.
    """
    train = _load_pair(cfg, PREPARED_TRAIN, PREPARED_TRAIN_META, "prepare")
    w, _ = ens.read_weights(_require(_out(cfg, weights_file("optimal")), "ensemble"))
    specs = _current_specs(cfg)
    if w.learner_names != [s.resolved_name for s in specs]:
        raise RuntimeError("weights file learners do not match configured learners; rerun ensemble")
    bases = _fit_bases(specs, train, cfg.threads)

    curves = []
    scores = []
    for name in train.feature_names:
        base_curves = [
            itp.pdp(lambda X, m=m: predict(m, X), train, name, k_levels=cfg.pdp_levels)
            for m in bases.values()
        ]
        curve = itp.ensemble_pdp(base_curves, w)
        curves.append(curve)
        scores.append(itp.pdp_importance(curve))
    table = itp.ranked_table(train.feature_names, scores, "pdp_sd")
    weeks = {m.name: m.week for m in train.feature_meta}

    return [
        _atomic_write(_out(cfg, PDP_CURVES), lambda p: itp.write_pdp_curves(curves, p)),
        _atomic_write(_out(cfg, PDP_IMPORTANCE), lambda p: itp.write_importance_table(table, p, weeks=weeks)),
    ]
