"""Run configuration: nested dataclasses read from and written to JSON.

Every section rejects unknown keys; missing keys take the defaults below.
The schema is documented in the README.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .metrics import LossWeights
from .synth import NoiseConfig

# Full-scale optimiser settings reported for the original model, kept for
# reference; desk-scale runs use OptimizerConfig's defaults.
REFERENCE_LR = 3e-5
REFERENCE_EPOCHS = 20


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AssetConfig:
    num_vertices: int = 200
    num_joints: int = 25
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    n_cameras: int = 4
    train_scenes: int = 256
    val_scenes: int = 64
    test_scenes: int = 512
    seed: int = 1000

    def __post_init__(self):
        if not 1 <= self.n_cameras <= 8:
            raise ValueError("n_cameras must be in [1, 8]")
        if min(self.train_scenes, self.val_scenes, self.test_scenes) < 0:
            raise ValueError("scene counts must be nonnegative")


@dataclass(frozen=True)
class JrnConfig:
    task_dim: int = 32
    hand_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    hand_mode: str = "joint"
    hand_kl: bool = False

    def __post_init__(self):
        if min(self.task_dim, self.hand_dim, *self.hidden) <= 0:
            raise ValueError("JRN widths must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.hand_mode not in ("joint", "hand"):
            raise ValueError(f"hand_mode must be 'joint' or 'hand', got {self.hand_mode!r}")


@dataclass(frozen=True)
class SrnConfig:
    shape_res: tuple[int, int] = (32, 32)
    face_res: tuple[int, int] = (16, 16)
    base_channels: int = 16
    attn_dim: int = 16
    reducer_hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"

    def __post_init__(self):
        for res in (self.shape_res, self.face_res):
            if len(res) != 2 or min(res) <= 0 or res[0] % 4 or res[1] % 4:
                raise ValueError(f"UV resolutions must be two positive multiples of 4, got {res}")
        if min(self.base_channels, self.attn_dim, *self.reducer_hidden) <= 0:
            raise ValueError("SRN widths must be positive")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 8

    def __post_init__(self):
        if not (self.lr > 0 and self.epochs >= 0 and self.batch_size >= 1):
            raise ValueError(f"invalid optimiser settings {self}")


@dataclass(frozen=True)
class RunConfig:
    asset: AssetConfig = field(default_factory=AssetConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    data: DataConfig = field(default_factory=DataConfig)
    jrn: JrnConfig = field(default_factory=JrnConfig)
    srn: SrnConfig = field(default_factory=SrnConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    temperature: float = 0.5
    procrustes_scale: bool = True
    seed: int = 0
    out_dir: str = "muc_run"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        for key, val in changes.items():
            if is_dataclass(val):
                val = asdict(val)
            d[key] = val
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _coerce(value, default, where: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        default = getattr(defaults, f.name)
        if is_dataclass(default):
            kwargs[f.name] = _build(type(default), d[f.name], f"{where}.{f.name}")
        else:
            kwargs[f.name] = _coerce(d[f.name], default, f"{where}.{f.name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return RunConfig.from_dict(d)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")
