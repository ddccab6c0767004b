"""Run configuration: documented defaults, YAML loading, dotted-path overrides.

Every field has a default so a bare ``RunConfig()`` describes a complete
desk-scale run against the toy teacher. The CLI layers: defaults, then the
YAML file, then RESDISTILL_* environment variables, then --set overrides.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .core import ConfigError, DEFAULT_EVAL_SCALES, Resolution, parse_resolution
from .data import DatasetSpec
from .losses import LossSpec
from .student import StudentConfig


@dataclass
class TrainStage:
    resolution: Resolution = Resolution(128, 128)
    steps: int = 10_000
    batch_size: int = 64
    lr: float = 7.5e-4
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if isinstance(self.resolution, (int, str)):
            self.resolution = parse_resolution(self.resolution)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")


def default_stages() -> list[TrainStage]:
    """Two-stage schedule: warm up at 128^2, then continue at 256^2."""
    return [
        TrainStage(Resolution(128, 128), 10_000, 64, 7.5e-4),
        TrainStage(Resolution(256, 256), 10_000, 64, 7.5e-4),
    ]


@dataclass
class TeacherSpec:
    kind: str = "toy"                 # "toy" | "external"
    seed: int = 123
    resolution_bias: str = "highres_sweet"
    path: str | None = None           # external weights path
    adapter: str | None = None        # registered adapter id

    def __post_init__(self) -> None:
        if self.kind not in ("toy", "external"):
            raise ValueError(f"teacher kind must be 'toy' or 'external', got {self.kind!r}")
        if self.kind == "external" and (self.path is None or self.adapter is None):
            raise ValueError("external teacher requires both path and adapter")


@dataclass
class MetricsSpec:
    names: tuple[str, ...] = ("mse", "psnr", "ssim", "lpips", "rfid")
    perceptual_backend: str = "toy-perceptual"
    feature_backend: str = "toy-conv"


@dataclass
class RemapSpec:
    method: str = "bilinear"
    position: str = "pre"
    antialias_down: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    output_dir: Path = Path("runs/default")
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(root=Path("data/images")))
    student: StudentConfig = field(default_factory=StudentConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    stages: list[TrainStage] = field(default_factory=default_stages)
    eval_scales: tuple[float, ...] = DEFAULT_EVAL_SCALES
    metrics: MetricsSpec = field(default_factory=MetricsSpec)
    remap: RemapSpec = field(default_factory=RemapSpec)
    # Resolutions for latent-statistics sweeps; the full-scale default follows
    # the 64^2..1024^2 grid, desk-scale runs override with smaller grids.
    latent_resolutions: tuple[Resolution, ...] = tuple(
        Resolution.square(s) for s in (64, 128, 256, 384, 512, 768, 1024)
    )
    checkpoint_every: int = 1000
    eval_batch_size: int = 16
    sample_latents: bool = True   # teacher eval uses sampled (not mean) latents

    def __post_init__(self) -> None:
        self.output_dir = Path(self.output_dir)


_RESOLUTION_FIELDS = {"base_resolution", "resolution"}


def _coerce(value: Any, target_type: Any, path: str) -> Any:
    try:
        if target_type is Resolution:
            return parse_resolution(value)
        if target_type is Path:
            return Path(value)
        return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(
                f"{path}.{key}: unknown field (known: {', '.join(sorted(known))})"
            )
        kwargs[key] = _convert_field(cls, key, value, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _convert_field(cls, key: str, value: Any, path: str) -> Any:
    defaults = {
        "dataset": DatasetSpec,
        "student": StudentConfig,
        "teacher": TeacherSpec,
        "loss": LossSpec,
        "metrics": MetricsSpec,
        "remap": RemapSpec,
    }
    if key == "stages":
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list of stages")
        return [_build_dataclass(TrainStage, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if key == "latent_resolutions":
        return tuple(parse_resolution(v) for v in value)
    if key == "eval_scales":
        return tuple(float(v) for v in value)
    if key in defaults and isinstance(value, dict):
        return _build_dataclass(defaults[key], value, path)
    if key in _RESOLUTION_FIELDS:
        return _coerce(value, Resolution, path)
    if key in ("output_dir", "root"):
        return _coerce(value, Path, path)
    if key == "names" and isinstance(value, list):
        return tuple(value)
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data, "config")


def config_to_dict(cfg: Any) -> Any:
    """Recursive plain-dict snapshot with stable, human-readable scalar forms."""
    if is_dataclass(cfg) and not isinstance(cfg, type):
        if isinstance(cfg, Resolution):
            return str(cfg)
        return {f.name: config_to_dict(getattr(cfg, f.name)) for f in fields(cfg)}
    if isinstance(cfg, Path):
        return str(cfg)
    if isinstance(cfg, (list, tuple)):
        return [config_to_dict(v) for v in cfg]
    if isinstance(cfg, dict):
        return {k: config_to_dict(v) for k, v in cfg.items()}
    return cfg


def apply_override(data: dict, dotted: str) -> None:
    """Apply one KEY.SUBKEY=VALUE override onto a raw config dict in place."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key=value")
    key_path, raw_value = dotted.split("=", 1)
    keys = key_path.strip().split(".")
    value = yaml.safe_load(raw_value)
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k} is not a mapping")
    node[keys[-1]] = value


def load_run_config(
    yaml_path: Path | None = None,
    overrides: list[str] | None = None,
    env: dict[str, str] | None = None,
) -> RunConfig:
    data: dict = {}
    if yaml_path is not None:
        loaded = yaml.safe_load(Path(yaml_path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {yaml_path} must contain a mapping")
        data = loaded
    if env:
        if "RESDISTILL_OUTPUT_DIR" in env:
            data["output_dir"] = env["RESDISTILL_OUTPUT_DIR"]
        if "RESDISTILL_DEVICE" in env:
            data["device"] = env["RESDISTILL_DEVICE"]
    for item in overrides or []:
        apply_override(data, item)
    return config_from_dict(data)
