"""Run configuration: one JSON file that fully determines a run.

Sections mirror the pipeline stages (dataset, sampling, model, train,
transform, decode, eval).  Every load validates ranges and types and
raises ConfigError naming the offending key, so commands can fail before
touching the filesystem.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from .datagen import SceneSpec
from .errors import ConfigError
from .field import TransformParams
from .model import ModelConfig
from .sampling import SamplingConfig
from .train import TrainConfig

CONFIG_FORMAT = "drdf-config 1"
THREADS_ENV = "DRDF_THREADS"


@dataclass(frozen=True)
class DatasetConfig:
    scene: SceneSpec = SceneSpec()
    n_train: int = 10
    n_val: int = 2
    n_test: int = 2
    # (views per set, sets per scene); defaults give 30 three-view and
    # 10 five-view sets over the train split
    set_specs: tuple = ((3, 3), (5, 1))
    image_width: int = 128
    image_height: int = 128
    fov_x: float = 63.4
    far: float = 8.0
    seed: int = 0
    max_tries: int = 400

    def __post_init__(self):
        object.__setattr__(
            self, "set_specs", tuple((int(k), int(n)) for k, n in self.set_specs)
        )


@dataclass(frozen=True)
class DecodeConfig:
    grid: int = 128  # rays per frustum side
    samples: int = 256  # depths per ray
    chunk_rays: int = 128

    def __post_init__(self):
        if self.grid < 2 or self.samples < 2 or self.chunk_rays < 1:
            raise ValueError("decode sizes must be >= 2")


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = (0.05, 0.1, 0.2, 0.5)
    cloud_points: int = 100000
    noise_sigma_r: tuple = (0.02, 0.04, 0.06, 0.08, 0.10)
    noise_sigma_t: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "noise_sigma_r", tuple(float(s) for s in self.noise_sigma_r))
        object.__setattr__(self, "noise_sigma_t", tuple(float(s) for s in self.noise_sigma_t))
        if any(t <= 0 for t in self.thresholds) or self.cloud_points < 1:
            raise ValueError("thresholds and cloud_points must be positive")


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "runs/run0"
    dataset: DatasetConfig = DatasetConfig()
    sampling: SamplingConfig = SamplingConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig(steps=20000)
    transform: TransformParams = TransformParams()
    decode: DecodeConfig = DecodeConfig()
    eval: EvalConfig = EvalConfig()
    threads: int | None = None

    def dataset_root(self) -> str:
        return os.path.join(self.out_dir, "dataset")

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        return int(os.environ.get(THREADS_ENV, "1"))


_SECTIONS = {
    "dataset": DatasetConfig,
    "sampling": SamplingConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "transform": TransformParams,
    "decode": DecodeConfig,
    "eval": EvalConfig,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = dict(data)
    if cls is DatasetConfig and "scene" in kwargs:
        kwargs["scene"] = _build(SceneSpec, kwargs["scene"], where + ".scene")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_to_dict(cfg: RunConfig) -> dict:
    d = {"format": CONFIG_FORMAT, "out_dir": cfg.out_dir, "threads": cfg.threads}
    for name in _SECTIONS:
        d[name] = asdict(getattr(cfg, name))
    return d


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    fmt = data.get("format", CONFIG_FORMAT)
    if fmt != CONFIG_FORMAT:
        raise ConfigError(f"unsupported config format '{fmt}'")
    known = {"format", "out_dir", "threads", *_SECTIONS}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    out_dir = data.get("out_dir", "runs/run0")
    if not isinstance(out_dir, str) or not out_dir:
        raise ConfigError("out_dir must be a non-empty string")
    threads = data.get("threads")
    if threads is not None and (not isinstance(threads, int) or threads < 1):
        raise ConfigError("threads must be a positive integer or null")
    kwargs = {"out_dir": out_dir, "threads": threads}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build(cls, data[name], name)
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(config_to_dict(cfg), sort_keys=True, indent=1) + "\n")


def apply_overrides(cfg: RunConfig, overrides: list) -> RunConfig:
    """Apply ``section.key=value`` strings on top of a config; values are
    parsed as JSON with a bare-string fallback."""
    data = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override '{key}': unknown section '{part}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override '{key}': unknown key '{parts[-1]}'")
        node[parts[-1]] = value
    return config_from_dict(data)
