"""Run configuration tree and its JSON form.

The file carries ``"schema_version": 1``. Parsing is strict: unknown keys, a different
schema version or values of the wrong type raise ``ValidationError``.
"""

from __future__ import annotations

import json
import logging
import types
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Union, get_args, get_origin, get_type_hints

from .const import BETA_END, BETA_START, EDICT_P, INFERENCE_STEPS, SMILE_ESCALATION, T_TRAIN
from .dataset import SyntheticSpec
from .denoiser import DenoiserConfig, TrainConfig
from .embeddings import DistillConfig
from .exceptions import MissingArtifactError, ValidationError
from .guidance import GuidanceMode
from .pipeline import EscalationSchedule
from .schedule import NoiseSchedule, build_schedule

_LOGGER = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "output"


@dataclass(frozen=True)
class ScheduleConfig:
    t_train: int = T_TRAIN
    beta_start: float = BETA_START
    beta_end: float = BETA_END
    inference_steps: int = INFERENCE_STEPS

    def build(self) -> NoiseSchedule:
        return build_schedule(self.t_train, self.beta_start, self.beta_end, self.inference_steps)


@dataclass(frozen=True)
class EdictSettings:
    p: float = EDICT_P
    escalation: tuple[tuple[int, float], ...] = SMILE_ESCALATION
    mode: GuidanceMode = GuidanceMode.NEGATIVE

    def schedule(self) -> EscalationSchedule:
        return EscalationSchedule(self.escalation)


@dataclass(frozen=True)
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    denoiser_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=6000, batch_size=64, learning_rate=2e-4)
    )
    classifier_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=600, batch_size=64, learning_rate=1e-3)
    )
    oracle_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=1000, batch_size=64, learning_rate=1e-3)
    )
    identity_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=1000, batch_size=64, learning_rate=1e-3)
    )
    ssl_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(iterations=1000, batch_size=64, learning_rate=1e-3)
    )
    distill_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            iterations=800, batch_size=64, learning_rate=0.01, weight_decay=1e-4
        )
    )
    distill: DistillConfig = field(default_factory=DistillConfig)
    edict: EdictSettings = field(default_factory=EdictSettings)
    seed: int = 0
    workers: int = 1
    classifier_thread_safe: bool = False
    bridge: bool = False

    def __post_init__(self):
        if self.workers < 1:
            raise ValidationError(f"workers must be positive, got {self.workers}")
        if self.denoiser.cond_dim < 1:
            raise ValidationError("cond_dim must be positive")

    @property
    def data_dir(self) -> Path:
        return Path(self.paths.data_dir)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.paths.checkpoint_dir)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    def with_seed(self, seed: int) -> RunConfig:
        """Reseed every stochastic phase from one base seed."""
        return replace(
            self,
            seed=seed,
            data=replace(self.data, seed=seed),
            denoiser_train=replace(self.denoiser_train, seed=seed),
            classifier_train=replace(self.classifier_train, seed=seed + 1),
            oracle_train=replace(self.oracle_train, seed=seed + 2),
            identity_train=replace(self.identity_train, seed=seed + 3),
            ssl_train=replace(self.ssl_train, seed=seed + 4),
            distill_train=replace(self.distill_train, seed=seed + 5),
        )


def _to_json(value: Any) -> Any:
    if is_dataclass(value):
        return {item.name: _to_json(getattr(value, item.name)) for item in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple | list):
        return [_to_json(item) for item in value]
    if isinstance(value, dict):
        return {str(key): _to_json(item) for key, item in value.items()}
    return value


def _from_json(kind: Any, value: Any, where: str) -> Any:
    origin = get_origin(kind)
    if is_dataclass(kind):
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected an object")
        hints = get_type_hints(kind)
        names = {item.name for item in fields(kind) if item.init}
        if unknown := sorted(value.keys() - names):
            raise ValidationError(f"{where}: unknown keys {unknown}")
        return kind(
            **{
                name: _from_json(hints[name], item, f"{where}.{name}")
                for name, item in value.items()
            }
        )
    if origin in (Union, types.UnionType):
        args = get_args(kind)
        if value is None and type(None) in args:
            return None
        (inner,) = (arg for arg in args if arg is not type(None))
        return _from_json(inner, value, where)
    if origin is tuple:
        if not isinstance(value, list):
            raise ValidationError(f"{where}: expected a list")
        args = get_args(kind)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_from_json(args[0], item, f"{where}[]") for item in value)
        if len(args) != len(value):
            raise ValidationError(f"{where}: expected {len(args)} items")
        pairs = zip(args, value, strict=True)
        return tuple(_from_json(arg, item, f"{where}[]") for arg, item in pairs)
    if origin is dict:
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected an object")
        _, item_kind = get_args(kind)
        return {key: _from_json(item_kind, item, f"{where}.{key}") for key, item in value.items()}
    if isinstance(kind, type) and issubclass(kind, Enum):
        try:
            return kind(value)
        except ValueError:
            raise ValidationError(f"{where}: invalid value {value!r}") from None
    if kind is float and isinstance(value, int | float) and not isinstance(value, bool):
        return float(value)
    if kind in (int, str, bool) and type(value) is kind:
        return value
    raise ValidationError(f"{where}: expected {getattr(kind, '__name__', kind)}, got {value!r}")


def serialize(config: RunConfig) -> str:
    return json.dumps(
        {"schema_version": SCHEMA_VERSION, **_to_json(config)}, indent=2, sort_keys=True
    )


def parse(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"Config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError("Config must be a JSON object")
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"Unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    return _from_json(RunConfig, data, "config")


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    if not path.exists():
        raise MissingArtifactError(str(path), "init-config")
    return parse(path.read_text())


def save_config(path: Path, config: RunConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize(config) + "\n")
    _LOGGER.info("Wrote configuration to %s", path)


def config_echo(config: RunConfig) -> dict[str, Any]:
    return _to_json(config)
