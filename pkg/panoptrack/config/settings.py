import tomllib
from dataclasses import dataclass, fields, is_dataclass
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from fs.base import FS
from fs.errors import ResourceNotFound
from inflection import underscore

from panoptrack.affinity import AffinityConfig
from panoptrack.config.defaults import (
    HIDDEN_SIZE,
    MOTION_MODELS,
    N_POINTS,
    PIPELINE_ALIASES,
    PIPELINES,
    PRESETS,
)
from panoptrack.fusion import FusionConfig
from panoptrack.learn import TrainConfig
from panoptrack.metrics import Matcher
from panoptrack.motion import KalmanConfig
from panoptrack.tracker import TrackerConfig
from panoptrack.utils.errors import ConfigError

T = TypeVar("T")

PRESET_SECTIONS: Dict[str, str] = {
    "start_score": "tracker",
    "continue_score": "tracker",
    "backdrop_frames": "tracker",
    "score_floor": "fusion",
}


@dataclass(frozen=True)
class LstmConfig:
    weights: Optional[str] = None
    hidden_size: int = HIDDEN_SIZE

    def __post_init__(self) -> None:
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be positive")


@dataclass(frozen=True)
class MetricConfig:
    matcher: str = "bev:2.0"
    n_points: int = N_POINTS

    def __post_init__(self) -> None:
        Matcher.parse(self.matcher)
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")

    @property
    def parsed_matcher(self) -> Matcher:
        return Matcher.parse(self.matcher)


@dataclass(frozen=True)
class PathConfig:
    detections: Optional[str] = None
    poses: Optional[str] = None
    gt: Optional[str] = None
    result: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    fusion: FusionConfig = FusionConfig()
    affinity: AffinityConfig = AffinityConfig()
    tracker: TrackerConfig = TrackerConfig()
    kalman: KalmanConfig = KalmanConfig()
    motion: LstmConfig = LstmConfig()
    train: TrainConfig = TrainConfig()
    metrics: MetricConfig = MetricConfig()
    paths: PathConfig = PathConfig()
    preset: Optional[str] = None


SECTIONS: Dict[str, type] = {
    f.name: f.type for f in fields(RunConfig) if f.name != "preset"
}


def normalize_key(key: str) -> str:
    return underscore(key).replace("-", "_").strip()


def normalize_pipeline(name: str) -> str:
    key = normalize_key(name)
    key = PIPELINE_ALIASES.get(key, key)
    if key not in PIPELINES:
        raise ConfigError("pipeline", f"unknown pipeline: {name}")
    return key


def normalize_motion(name: str) -> str:
    key = normalize_key(name)
    if key not in MOTION_MODELS:
        raise ConfigError("motion_model", f"unknown motion model: {name}")
    return key


def _freeze(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def table_to_dataclass(cls: Type[T], table: Mapping[str, Any], section: str) -> T:
    """Build ``cls`` from a TOML table, rejecting keys it does not declare."""
    if not is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    if not isinstance(table, Mapping):
        raise ConfigError(section, "expected a table")
    known = {f.name for f in fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in table.items():
        name = normalize_key(key)
        if name not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
        kwargs[name] = _freeze(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as error:
        raise ConfigError(section, str(error)) from None


def read_toml(filesystem: FS, path: str) -> Dict[str, Any]:
    try:
        return tomllib.loads(filesystem.readtext(path, encoding="utf-8"))
    except ResourceNotFound:
        raise ConfigError(path, "file not found") from None
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(path, f"invalid TOML: {error}") from None


def _normalize_table(table: Mapping[str, Any], section: str) -> Dict[str, Any]:
    if not isinstance(table, Mapping):
        raise ConfigError(section, "expected a table")
    return {normalize_key(k): v for k, v in table.items()}


def build_run_config(
    table: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """Layer defaults, a detector preset, a TOML table and CLI overrides.

    ``overrides`` maps section names to values; ``None`` values are skipped so
    unset CLI flags never mask the file.
    """
    table = _normalize_table(table or {}, "config")
    file_preset = table.pop("preset", None)
    preset = preset or file_preset
    merged: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}

    if preset is not None:
        preset = normalize_key(preset)
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset: {preset}")
        for key, value in PRESETS[preset].items():
            merged[PRESET_SECTIONS[key]][key] = value

    for section, values in table.items():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
        merged[section].update(_normalize_table(values, section))

    for section, values in (overrides or {}).items():
        merged[section].update(
            {normalize_key(k): v for k, v in values.items() if v is not None}
        )

    tracker = merged["tracker"]
    if "pipeline" in tracker:
        tracker["pipeline"] = normalize_pipeline(tracker["pipeline"])
    if "motion_model" in tracker:
        tracker["motion_model"] = normalize_motion(tracker["motion_model"])

    sections = {
        name: table_to_dataclass(cls, merged[name], name) for name, cls in SECTIONS.items()
    }
    return RunConfig(preset=preset, **sections)


def load_run_config(
    filesystem: Optional[FS] = None,
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Mapping[str, Any]]] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    table = read_toml(filesystem, path) if filesystem is not None and path else {}
    return build_run_config(table=table, overrides=overrides, preset=preset)
