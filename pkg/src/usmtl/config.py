"""Run configuration: one JSON document with a section per subsystem."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .balancer import BalancerConfig
from .bridge import BridgeConfig
from .encoder import EncoderConfig
from .losses import LossConfig
from .model import HeadConfig


@dataclass
class OptimConfig:
    lr_heads: float = 2e-4
    lr_backbone: float = 2e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    accumulation_steps: int = 16
    per_device_batch: int = 1
    clip_max_norm: float = 1.0
    total_steps: int = 500
    seed: int = 42

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.lr_heads <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be positive")
        if self.accumulation_steps < 1 or self.per_device_batch < 1:
            raise ValueError("accumulation_steps and per_device_batch must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.per_device_batch * self.accumulation_steps


@dataclass
class AugmentConfig:
    brightness_contrast_p: float = 0.35
    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    noise_p: float = 0.30
    noise_var: tuple[float, float] = (5.0, 45.0)
    blur_p: float = 0.20
    blur_kernels: tuple[int, ...] = (3, 5)
    motion_p: float = 0.10
    motion_kernels: tuple[int, ...] = (3, 5)

    def __post_init__(self):
        self.noise_var = tuple(float(v) for v in self.noise_var)
        self.blur_kernels = tuple(int(k) for k in self.blur_kernels)
        self.motion_kernels = tuple(int(k) for k in self.motion_kernels)
        for name in ("brightness_contrast_p", "noise_p", "blur_p", "motion_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        for k in self.blur_kernels + self.motion_kernels:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"blur kernels must be odd, got {k}")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(brightness_contrast_p=0.0, noise_p=0.0, blur_p=0.0, motion_p=0.0)


@dataclass
class DataConfig:
    augment: bool = True


_SECTIONS = {
    "encoder": EncoderConfig,
    "bridge": BridgeConfig,
    "heads": HeadConfig,
    "losses": LossConfig,
    "balancer": BalancerConfig,
    "optimizer": OptimConfig,
    "augment": AugmentConfig,
    "data": DataConfig,
}


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return {name: _plain(asdict(getattr(self, name))) for name in _SECTIONS}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in _SECTIONS.items():
            section = d.get(name, {})
            allowed = {f.name for f in fields(klass)}
            bad = set(section) - allowed
            if bad:
                raise ValueError(f"config section {name!r}: unknown keys {sorted(bad)}")
            kwargs[name] = klass(**section)
        return cls(**kwargs)

    @classmethod
    def read(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def desk_profile() -> RunConfig:
    """64x64 inputs with D=64: the desk-scale profile used by the overfit suite."""
    return RunConfig(encoder=EncoderConfig(image_size=64), bridge=BridgeConfig(width=64))
