"""Shared types, shape contracts and configuration."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch


class BBNetError(Exception):
    """Base class for every error raised by this package."""


class DimsError(BBNetError, ValueError):
    def __init__(self, message: str, divisor: int | None = None):
        super().__init__(message)
        self.divisor = divisor


class ShapeError(BBNetError, ValueError):
    pass


class ConfigError(BBNetError, ValueError):
    pass


class Stage(str, enum.Enum):
    """Semantic tag for intermediate activations."""

    CAT = "f_cat"
    SH = "f_sh"
    MV = "f_mv"
    COL = "f_col"
    SIN = "f_sin"
    MM = "f_mm"
    SUM = "f_sum"
    W = "f_w"
    OBJ = "f_obj"
    AG = "f_ag"
    LOCAL = "f_local"
    GLOBAL = "f_global"
    LGR = "f_lgr"


BACKBONES = ("tiny_cnn", "res2net50_like", "resnet50_like", "vgg16_like")


@dataclass(frozen=True)
class Dims:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise DimsError(f"{name} must be a positive integer, got {value!r}")

    @classmethod
    def of(cls, tensor: torch.Tensor) -> "Dims":
        if tensor.dim() != 4:
            raise ShapeError(f"expected a 4-axis tensor, got shape {tuple(tensor.shape)}")
        return cls(*(int(s) for s in tensor.shape))


@dataclass(frozen=True)
class FeatureMap:
    """A (B, C, H, W) activation tagged with the stage that produced it."""

    data: torch.Tensor
    stage: Stage

    def __post_init__(self):
        Dims.of(self.data)
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError(f"{self.stage.value} contains non-finite values")

    @property
    def dims(self) -> Dims:
        return Dims.of(self.data)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 288
    channels: int = 64
    multiview_iters: int = 2
    lgr_grid: int = 3
    lgr_top_n: int = 1
    group_consensus: bool = True
    backbone_id: str = "res2net50_like"
    # ablation switches; the full model has all of them on
    use_cfe: bool = True
    use_ofs: bool = True
    use_lgr: bool = True
    learn_gamma: bool = True

    def __post_init__(self):
        if self.input_size <= 0 or self.channels <= 0:
            raise ConfigError("input_size and channels must be positive")
        if not 0 <= self.multiview_iters <= 4:
            raise ConfigError(f"multiview_iters must lie in [0, 4], got {self.multiview_iters}")
        if self.lgr_grid != 3:
            raise ConfigError("lgr_grid is fixed to 3")
        if not 1 <= self.lgr_top_n <= self.lgr_grid ** 2:
            raise ConfigError(f"lgr_top_n must lie in [1, 9], got {self.lgr_top_n}")
        if self.backbone_id not in BACKBONES:
            raise ConfigError(f"unknown backbone_id {self.backbone_id!r}; expected one of {BACKBONES}")

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """CPU-sized profile used by the test suite and desk-scale runs."""
        base = dict(input_size=96, channels=16, backbone_id="tiny_cnn")
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 10
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 50
    bce_only: bool = False
    data_root: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive; momentum and weight_decay non-negative")
        if self.batch_size <= 0 or self.max_steps < 0 or self.checkpoint_every <= 0:
            raise ConfigError("batch_size and checkpoint_every must be positive, max_steps non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def validate_dims(d: Dims, cfg: ModelConfig) -> None:
    """Check that the stride-8 working resolution splits in halves and thirds.

    ``d`` describes the input images; their spatial size must equal
    ``cfg.input_size``.
    """
    if d.height != cfg.input_size or d.width != cfg.input_size:
        raise DimsError(
            f"input is {d.height}x{d.width}, config expects {cfg.input_size}x{cfg.input_size}"
        )
    if cfg.input_size % 8:
        raise DimsError(f"input_size {cfg.input_size} is not divisible by 8", divisor=8)
    work = cfg.input_size // 8
    for divisor in (2, 3):
        if work % divisor:
            raise DimsError(
                f"stride-8 resolution {work} (input_size {cfg.input_size}) is not divisible by {divisor}",
                divisor=divisor,
            )


# ---------------------------------------------------------------------------
# flat key=value config files

def _parse_value(raw: str, kind: Any):
    raw = raw.strip()
    if kind in (bool, "bool"):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def _fields(cls) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    """Read a flat ``key = value`` file holding both model and training keys.

    Blank lines and ``#`` comments are ignored. Unknown keys are an error.
    """
    model_fields = _fields(ModelConfig)
    train_fields = _fields(TrainConfig)
    model_kw: dict[str, Any] = {}
    train_kw: dict[str, Any] = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            if key in model_fields:
                model_kw[key] = _parse_value(value, model_fields[key])
            elif key in train_fields:
                train_kw[key] = _parse_value(value, train_fields[key])
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def dump_config(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> str:
    lines = [f"{k} = {_format(v)}" for k, v in dataclasses.asdict(model_cfg).items()]
    if train_cfg is not None:
        lines += [f"{k} = {_format(v)}" for k, v in dataclasses.asdict(train_cfg).items()]
    return "\n".join(lines) + "\n"


def save_config(path: str | Path, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> None:
    Path(path).write_text(dump_config(model_cfg, train_cfg))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
