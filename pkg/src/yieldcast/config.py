"""Run configuration: a single YAML document with fail-fast validation.

Unknown keys are an error at every level, so typos never silently fall back
to defaults. Per-learner seeds are derived from the global seed and the
learner name unless given explicitly.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import yaml

from ._util import spawn_rng
from .learners import LearnerSpec
from .synth import PlantedEffect, SynthConfig

CONFIG_VERSION = 1


def derive_seed(seed: int, *keys) -> int:
    """Stable 64-bit seed derived from (seed, *keys)."""
    return int(spawn_rng(seed, *keys).integers(0, 2**63))


def _expect_mapping(value, context: str) -> dict:
    if not isinstance(value, dict):
        raise ValueError(f"{context} must be a mapping, got {type(value).__name__}")
    return value


def _check_keys(mapping: dict, allowed, required, context: str) -> None:
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ValueError(f"unknown keys in {context}: {sorted(unknown)}")
    missing = set(required) - set(mapping)
    if missing:
        raise ValueError(f"missing keys in {context}: {sorted(missing)}")


@dataclass
class PathsConfig:
    data: Path
    metadata: Path
    output_dir: Path
    areas: Optional[Path] = None


@dataclass
class SelectionConfig:
    enabled: bool = True
    drop: List[str] = field(default_factory=list)
    top_m: int = 80
    correlation_threshold: float = 0.9
    permutation_repeats: int = 5
    per_fold: bool = False
    forest: Dict[str, object] = field(default_factory=lambda: {"n_trees": 50})


@dataclass
class LearnerConfig:
    name: str
    kind: str
    hyperparams: Dict[str, object] = field(default_factory=dict)
    space: Dict[str, object] = field(default_factory=dict)
    seed: Optional[int] = None

    def spec(self, global_seed: int) -> LearnerSpec:
        seed = self.seed if self.seed is not None else derive_seed(global_seed, "learner", self.name)
        return LearnerSpec(kind=self.kind, hyperparams=dict(self.hyperparams), seed=seed, name=self.name)


ENSEMBLE_KINDS = (
    "optimal",
    "average",
    "ewa",
    "stacked_ols",
    "stacked_lasso",
    "stacked_random_forest",
    "stacked_gbm",
)

# Level-2 defaults for the stacked variants; small trees keep the second
# level from overfitting k-column inputs.
STACKED_LEVEL2_DEFAULTS = {
    "stacked_ols": ("ols", {}),
    "stacked_lasso": ("lasso", {"lam": 1.0}),
    "stacked_random_forest": ("random_forest", {"n_trees": 100, "max_depth": 4}),
    "stacked_gbm": ("gbm", {"n_trees": 100, "learning_rate": 0.1, "max_depth": 2}),
}


@dataclass
class RunConfig:
    paths: PathsConfig
    seed: int = 0
    threads: int = 1
    test_years: List[int] = field(default_factory=list)
    window: int = 8
    weather_cutoff: Optional[Union[int, str]] = None
    cutoff_sweep: List[Optional[Union[int, str]]] = field(default_factory=list)
    feature_selection: SelectionConfig = field(default_factory=SelectionConfig)
    learners: List[LearnerConfig] = field(default_factory=list)
    ensembles: List[str] = field(default_factory=lambda: ["optimal", "average", "ewa"])
    ewa_temperature: float = 1.0
    ewa_raw_errors: bool = False
    tuning_budget: int = 20
    compat_paper_preprocessing: bool = False
    mda_anchor_truth: bool = False
    pdp_levels: int = 20
    synth: Optional[SynthConfig] = None

    def learner_specs(self) -> List[LearnerSpec]:
        if not self.learners:
            raise ValueError("config defines no learners")
        names = [lc.name for lc in self.learners]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate learner names: {names}")
        return [lc.spec(self.seed) for lc in self.learners]

    def level2_spec(self, ensemble_kind: str) -> LearnerSpec:
        kind, hp = STACKED_LEVEL2_DEFAULTS[ensemble_kind]
        return LearnerSpec(
            kind=kind, hyperparams=dict(hp), seed=derive_seed(self.seed, "level2", ensemble_kind),
            name=ensemble_kind,
        )


def _parse_space(space: dict, context: str) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for name, domain in _expect_mapping(space, context).items():
        dctx = f"{context}.{name}"
        domain = _expect_mapping(domain, dctx)
        if "choices" in domain:
            _check_keys(domain, ["choices"], ["choices"], dctx)
            if not isinstance(domain["choices"], list) or not domain["choices"]:
                raise ValueError(f"{dctx}.choices must be a non-empty list")
            out[name] = list(domain["choices"])
        else:
            _check_keys(domain, ["min", "max"], ["min", "max"], dctx)
            out[name] = (domain["min"], domain["max"])
    return out


def _parse_synth(doc: dict) -> SynthConfig:
    _check_keys(
        doc,
        [
            "n_locations", "n_states", "year_start", "year_end", "noise_sd",
            "base_range", "slope_range", "effects", "n_noise_features", "seed",
        ],
        ["year_start", "year_end"],
        "synth",
    )
    effects = []
    for i, eff in enumerate(doc.get("effects", [])):
        eff = _expect_mapping(eff, f"synth.effects[{i}]")
        _check_keys(eff, ["name", "week", "coefficient"], ["name", "week", "coefficient"], f"synth.effects[{i}]")
        effects.append(PlantedEffect(name=eff["name"], week=int(eff["week"]), coefficient=float(eff["coefficient"])))
    kwargs = dict(doc)
    kwargs["effects"] = effects
    if "base_range" in kwargs:
        kwargs["base_range"] = tuple(kwargs["base_range"])
    if "slope_range" in kwargs:
        kwargs["slope_range"] = tuple(kwargs["slope_range"])
    return SynthConfig(**kwargs)


def parse_config(doc: dict, base_dir: Path) -> RunConfig:
    doc = _expect_mapping(doc, "config")
    _check_keys(
        doc,
        [
            "version", "paths", "seed", "threads", "test_years", "window",
            "weather_cutoff", "cutoff_sweep", "feature_selection", "learners",
            "ensembles", "ewa", "tuning", "compat_paper_preprocessing",
            "evaluate", "interpret", "synth",
        ],
        ["version", "paths"],
        "config",
    )
    if doc["version"] != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {doc['version']!r} (expected {CONFIG_VERSION})")

    paths_doc = _expect_mapping(doc["paths"], "paths")
    _check_keys(paths_doc, ["data", "metadata", "areas", "output_dir"], ["data", "metadata", "output_dir"], "paths")
    paths = PathsConfig(
        data=base_dir / paths_doc["data"],
        metadata=base_dir / paths_doc["metadata"],
        output_dir=base_dir / paths_doc["output_dir"],
        areas=(base_dir / paths_doc["areas"]) if paths_doc.get("areas") else None,
    )

    selection = SelectionConfig()
    if "feature_selection" in doc:
        sel = _expect_mapping(doc["feature_selection"], "feature_selection")
        _check_keys(
            sel,
            ["enabled", "drop", "top_m", "correlation_threshold", "permutation_repeats", "per_fold", "forest"],
            [],
            "feature_selection",
        )
        selection = SelectionConfig(
            enabled=bool(sel.get("enabled", True)),
            drop=list(sel.get("drop", [])),
            top_m=int(sel.get("top_m", 80)),
            correlation_threshold=float(sel.get("correlation_threshold", 0.9)),
            permutation_repeats=int(sel.get("permutation_repeats", 5)),
            per_fold=bool(sel.get("per_fold", False)),
            forest=dict(sel.get("forest", {"n_trees": 50})),
        )

    learners = []
    for i, lrn in enumerate(doc.get("learners", [])):
        lrn = _expect_mapping(lrn, f"learners[{i}]")
        _check_keys(lrn, ["name", "kind", "hyperparams", "space", "seed"], ["kind"], f"learners[{i}]")
        learners.append(
            LearnerConfig(
                name=lrn.get("name", lrn["kind"]),
                kind=lrn["kind"],
                hyperparams=dict(lrn.get("hyperparams", {})),
                space=_parse_space(lrn.get("space", {}), f"learners[{i}].space") if lrn.get("space") else {},
                seed=lrn.get("seed"),
            )
        )

    ensembles = list(doc.get("ensembles", ["optimal", "average", "ewa"]))
    for e in ensembles:
        if e not in ENSEMBLE_KINDS:
            raise ValueError(f"unknown ensemble kind '{e}' (known: {ENSEMBLE_KINDS})")

    ewa_temperature, ewa_raw = 1.0, False
    if "ewa" in doc:
        ewa_doc = _expect_mapping(doc["ewa"], "ewa")
        _check_keys(ewa_doc, ["temperature", "raw_errors"], [], "ewa")
        ewa_temperature = float(ewa_doc.get("temperature", 1.0))
        ewa_raw = bool(ewa_doc.get("raw_errors", False))

    tuning_budget = 20
    if "tuning" in doc:
        tuning = _expect_mapping(doc["tuning"], "tuning")
        _check_keys(tuning, ["budget"], [], "tuning")
        tuning_budget = int(tuning.get("budget", 20))

    mda_anchor = False
    if "evaluate" in doc:
        ev = _expect_mapping(doc["evaluate"], "evaluate")
        _check_keys(ev, ["mda_anchor_truth"], [], "evaluate")
        mda_anchor = bool(ev.get("mda_anchor_truth", False))

    pdp_levels = 20
    if "interpret" in doc:
        it = _expect_mapping(doc["interpret"], "interpret")
        _check_keys(it, ["k_levels"], [], "interpret")
        pdp_levels = int(it.get("k_levels", 20))

    return RunConfig(
        paths=paths,
        seed=int(doc.get("seed", 0)),
        threads=int(doc.get("threads", 1)),
        test_years=[int(y) for y in doc.get("test_years", [])],
        window=int(doc.get("window", 8)),
        weather_cutoff=doc.get("weather_cutoff"),
        cutoff_sweep=list(doc.get("cutoff_sweep", [])),
        feature_selection=selection,
        learners=learners,
        ensembles=ensembles,
        ewa_temperature=ewa_temperature,
        ewa_raw_errors=ewa_raw,
        tuning_budget=tuning_budget,
        compat_paper_preprocessing=bool(doc.get("compat_paper_preprocessing", False)),
        mda_anchor_truth=mda_anchor,
        pdp_levels=pdp_levels,
        synth=_parse_synth(_expect_mapping(doc["synth"], "synth")) if "synth" in doc else None,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    return parse_config(doc, base_dir=path.parent)
