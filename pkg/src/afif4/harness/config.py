"""Pipeline configuration and its ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

from ..convnet import TrainConfig, preset
from ..datagen import AugmentConfig
from ..foggy import MembraneSolveConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    preset: str = "afif4-tiny"
    seed: int = 0
    folds: int = 5
    # patches and detection
    patch_margin: float = 1.5
    max_faces: int = 1
    mask_fill: float | None = None  # None: image mean
    ssr_scale: float | None = None  # None: max(width, height) / 4
    ssr_eps: float = 1 / 255
    detector: str = ""  # external detector command; landmarks from the manifest win
    # foggy face
    membrane_method: str = "conjugate-gradient"
    membrane_tolerance: float = 1e-6
    membrane_max_iterations: int = 100_000
    # CNN training
    augment: bool = True
    augment_shift: int = 5
    learning_rate: float = 0.02
    iterations: int = 1000
    batch_size: int = 16
    init_scale: float = 1.0
    momentum: float = 0.9
    # fusion
    boost_rounds: int = 50
    lda_shrinkage: float = 0.1
    # degradations
    occlusion_margin: float = 1.2
    occlusion_fill: float = 0.5
    workers: int = 1

    def __post_init__(self):
        preset(self.preset)
        self.membrane()
        self.train_config()
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.boost_rounds < 1:
            raise ConfigError("boost_rounds must be >= 1")
        if not 0 <= self.lda_shrinkage <= 1:
            raise ConfigError("lda_shrinkage must lie in [0, 1]")
        if self.patch_margin < 1:
            raise ConfigError("patch_margin must be >= 1")

    def network_spec(self):
        return preset(self.preset)

    def membrane(self) -> MembraneSolveConfig:
        return MembraneSolveConfig(self.membrane_method, self.membrane_tolerance,
                                   self.membrane_max_iterations)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.iterations, self.batch_size,
                           self.seed if seed is None else seed, self.init_scale, self.momentum)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.augment_shift)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str | object]) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], raw)
        return cls(**kwargs)


def _coerce(f: dataclasses.Field, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    default = f.default
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    if "None" in kind and text.lower() in ("", "none", "auto"):
        return None
    try:
        if isinstance(default, bool) or kind == "bool":
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int) or kind.startswith("int"):
            return int(text)
        if isinstance(default, float) or kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name}") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        values[key] = value
    return values


def load_config(path, **overrides) -> PipelineConfig:
    values: dict = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig.from_mapping(values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        lines.append(f"{key} = {'auto' if value is None else value}")
    return "\n".join(lines) + "\n"
