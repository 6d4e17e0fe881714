"""Experiment configuration: nested dataclasses with strict JSON loading.

One JSON file drives every CLI subcommand. Unknown keys are rejected so a
typo cannot silently fall back to a default. The `DISTILLSEG_SEED`
environment variable overrides the file's seed (CI convenience); an
explicit --seed flag beats both.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .preprocess import AugmentationRanges
from .volume_io import Modality, PhantomSpec

SEED_ENV_VAR = "DISTILLSEG_SEED"


@dataclass
class PhantomDataConfig:
    n_train: int = 12
    n_val: int = 4
    n_test: int = 4
    shape: tuple[int, int, int] = (32, 32, 32)
    spec: PhantomSpec = field(default_factory=PhantomSpec)


@dataclass
class DataConfig:
    source: str = "phantom"  # phantom | real
    directory: Optional[str] = None
    phantom: PhantomDataConfig = field(default_factory=PhantomDataConfig)

    def __post_init__(self):
        if self.source not in ("phantom", "real"):
            raise ConfigError(f"data.source must be 'phantom' or 'real', got {self.source!r}")


@dataclass
class SplitSection:
    # None derives exact fractions from the phantom counts; real data needs
    # explicit (train, validation, test) fractions summing to 1.
    fractions: Optional[tuple[float, float, float]] = None
    unlabeled_from_validation: float = 0.5
    unlabeled_from_test: float = 0.2
    unlabeled_enabled: bool = True


@dataclass
class NetworkSection:
    depth: int = 3
    base_channels: int = 8
    num_groups: Optional[int] = None  # None keeps the per-kind default


@dataclass
class TrainingSection:
    epochs: int = 30
    patch_size: int = 32
    steps_per_epoch: Optional[int] = None
    checkpoint_every: int = 10
    validate_every: int = 5
    augmentation_enabled: bool = True
    augmentation: AugmentationRanges = field(default_factory=AugmentationRanges)
    # per-kind partial OptimizerSpec / batch overrides, e.g.
    # {"cascaded_unet3d": {"initial_lr": 0.02, "batch_size": 2}}
    overrides: dict = field(default_factory=dict)


@dataclass
class EnsembleSection:
    fusion: str = "average"


@dataclass
class PseudoSection:
    threshold: float = 0.5
    audit: bool = True


@dataclass
class EvaluationSection:
    threshold: float = 0.5
    overlap: float = 0.0


@dataclass
class ExperimentConfig:
    run_id: str = "desk-run"
    seed: int = 0
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitSection = field(default_factory=SplitSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self) -> None:
        if self.data.source == "real":
            if not self.data.directory:
                raise ConfigError("data.source is 'real' but data.directory is not set")
            if not Path(self.data.directory).is_dir():
                raise ConfigError(f"data.directory does not exist: {self.data.directory}")
            if self.split.fractions is None:
                raise ConfigError("real data needs explicit split.fractions")


def _convert(value, hint):
    origin = typing.get_origin(hint)
    if hint is typing.Any or hint is None:
        return value
    if origin is typing.Union:  # includes Optional
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _convert(value, args[0])
    if dataclasses.is_dataclass(hint):
        return _from_dict(hint, value)
    if origin in (tuple,):
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(v, args[0]) for v in value)
        return tuple(_convert(v, a) for v, a in zip(value, args))
    if origin in (list,):
        (arg,) = typing.get_args(hint)
        return [_convert(v, arg) for v in value]
    if origin in (dict,) or hint is dict:
        return dict(value)
    if hint is float:
        return float(value)
    if hint is int:
        if isinstance(value, bool) or int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}")
        return int(value)
    return value


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if cls is PhantomSpec and f.name == "intensities":
            value = {Modality(k): tuple(v) for k, v in value.items()}
            kwargs[f.name] = value
            continue
        kwargs[f.name] = _convert(value, hints[f.name])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} section: {exc}") from exc


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {
            (k.value if hasattr(k, "value") else k): _to_jsonable(v) for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str, bool)):
        return obj.value
    return obj


def config_to_dict(config: ExperimentConfig) -> dict:
    return _to_jsonable(config)


def load_config(
    path,
    run_id: Optional[str] = None,
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """Load and validate a config file, applying seed/run-id overrides.

    Seed precedence: explicit argument (CLI flag) > DISTILLSEG_SEED > file.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    config = _from_dict(ExperimentConfig, data)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    if seed is not None:
        config.seed = int(seed)
    if run_id is not None:
        config.run_id = run_id
    config.validate()
    return config


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2))


def section_hash(*sections) -> str:
    """Stable hash of config sections (and parent hashes) for stage caching."""
    blob = json.dumps([_to_jsonable(s) for s in sections], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
