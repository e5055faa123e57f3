"""Pipeline configuration: nested dataclasses with a versioned JSON form."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from foldrare.synth import PAPER_BANDS, GeneratorParams, params_to_dict
from foldrare.vae import ModelConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class Splits:
    n_labeled: int = 40
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    n_interrupted: int = 20
    n_asymmetry: int = 100


@dataclass
class PreprocessConfig:
    downsample_factor: int = 2
    margin: int = 4
    dilation_mm: float = 5.0
    pad_dims: tuple = (32, 32, 40)
    target_roles: tuple = ("central",)


@dataclass
class GridConfig:
    betas: tuple = (1.0, 2.0, 4.0)
    latent_dims: tuple = (8, 16, 32)
    epochs: int = 6
    n_train: int = 200
    gate: float = 1.25
    use_best: bool = False


@dataclass
class BenchmarkConfig:
    bands: tuple = PAPER_BANDS
    # paper-scale skeleton voxel count used to rescale the bands; the desk
    # count is measured inside the mask over the training cohort
    reference_voxels: int = 3500
    split_ratio: float = 0.5
    # left hemispheres: more double knobs and a steeper course, both inside
    # the range the right-hemisphere training cohort already covers
    left_overrides: dict = field(default_factory=lambda: {"double_knob_prob": 0.35, "tilt_range": [0.03, 0.06]})
    interrupted_overrides: dict = field(default_factory=lambda: {"interruption_prob": 1.0, "gap_voxels": 20})
    # interrupted subjects are compared with the first this-many test controls
    interrupted_controls: int = 200


@dataclass
class DetectConfig:
    k_folds: int = 5
    svm_lambda: float = 1e-2
    svm_epochs: int = 40
    nu: float = 0.1
    repeats: int = 10
    n_trees: int = 100
    noise_floor: float = 0.1
    gap_mass: float = 0.3
    gap_subjects: float = 0.7


@dataclass
class ExploreConfig:
    steps: int = 7
    axis: int = 2
    threshold: float = 0.4
    n_interpolations: int = 2


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    workdir: str = "work"
    seed: int = 7
    region: str = "central"
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    splits: Splits = field(default_factory=Splits)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(learning_rate=1e-3, epochs=160, batch_size=4))
    gridsearch: GridConfig = field(default_factory=GridConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    explore: ExploreConfig = field(default_factory=ExploreConfig)

    def __post_init__(self):
        s = self.splits
        if min(s.n_labeled, s.n_train, s.n_val, s.n_test, s.n_interrupted, s.n_asymmetry) < 1:
            raise ConfigError("every split size must be >= 1")
        if self.benchmark.interrupted_controls < 1:
            raise ConfigError("benchmark.interrupted_controls must be >= 1")
        if s.n_labeled > s.n_train:
            raise ConfigError("labeled subjects are drawn from the training split")
        if self.generator.region != self.region:
            raise ConfigError(f"generator region {self.generator.region!r} != pipeline region {self.region!r}")
        if tuple(self.preprocess.pad_dims) != tuple(self.model.input_dims):
            raise ConfigError("preprocess.pad_dims must equal model.input_dims")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a u64")

    @property
    def n_controls(self) -> int:
        return self.splits.n_train + self.splits.n_val + self.splits.n_test

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, GeneratorParams):
                v = params_to_dict(v)
            elif isinstance(v, ModelConfig):
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            d[f.name] = _jsonable(v)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for name, value in d.items():
                kw[name] = _build(name, value)
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e


_SECTIONS = {
    "splits": Splits,
    "preprocess": PreprocessConfig,
    "gridsearch": GridConfig,
    "benchmark": BenchmarkConfig,
    "detect": DetectConfig,
    "explore": ExploreConfig,
}


def _build(name, value):
    if name == "generator":
        return GeneratorParams.from_dict(_section_dict(name, value))
    if name == "model":
        return ModelConfig.from_dict(_section_dict(name, value))
    if name in _SECTIONS:
        cls = _SECTIONS[name]
        value = _section_dict(name, value)
        allowed = {f.name for f in dataclasses.fields(cls)}
        extra = set(value) - allowed
        if extra:
            raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
        return cls(**{k: _tuplify(v) if k != "left_overrides" and k != "interrupted_overrides" else v
                      for k, v in value.items()})
    return value


def _section_dict(name, value) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    return value


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, assignments) -> dict:
    """Apply `a.b.c=value` assignments to a config dict (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override path {key!r} does not name a config field")
            node = node[p]
        free_form = len(parts) > 1 and parts[-2].endswith("_overrides")
        if parts[-1] not in node and not free_form:
            raise ConfigError(f"override path {key!r} does not name a config field")
        node[parts[-1]] = parse_value(raw)
    return d


def load_config(path=None, overrides=(), seed: int | None = None) -> PipelineConfig:
    d = PipelineConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        d = _merge(d, user)
    d = apply_overrides(d, overrides)
    if seed is not None:
        d["seed"] = seed
    return PipelineConfig.from_dict(d)


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("left_overrides", "interrupted_overrides"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out
