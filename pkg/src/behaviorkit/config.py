"""Experiment configuration.

Every knob that changes numerics lives here so that the ``config.json`` copied
into a run directory is enough to re-execute the run.  Two presets ship:
``desk`` (tiny model, CPU-runnable) and ``reference`` (ViT-L reference scale, for
documentation and shape/size checks only).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import InvalidArgumentError


@dataclass
class EncoderConfig:
    frames: int = 8
    image_size: int = 32
    tubelet: tuple = (2, 8, 8)
    dim: int = 64
    depth: int = 4
    heads: int = 4
    predictor_depth: int = 2
    predictor_dim: int = 32
    predictor_heads: int = 4
    mlp_ratio: float = 4.0
    in_chans: int = 3

    @classmethod
    def tiny(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def vit_large(cls) -> "EncoderConfig":
        # predictor width 384 / 12 heads lands the predictor at ~22M parameters
        return cls(frames=16, image_size=224, tubelet=(2, 16, 16), dim=1024, depth=24,
                   heads=16, predictor_depth=12, predictor_dim=384, predictor_heads=12)

    @property
    def grid(self) -> tuple:
        t, h, w = self.tubelet
        return (self.frames // t, self.image_size // h, self.image_size // w)

    @property
    def num_tokens(self) -> int:
        gt, gh, gw = self.grid
        return gt * gh * gw

    def validate(self) -> None:
        t, h, w = self.tubelet
        if min(self.frames, self.image_size, t, h, w, self.dim, self.depth, self.heads) <= 0:
            raise InvalidArgumentError(f"encoder sizes must be positive: {self}")
        if self.frames % t:
            raise InvalidArgumentError(f"frames={self.frames} not divisible by tubelet t={t}")
        if self.image_size % h or self.image_size % w:
            raise InvalidArgumentError(
                f"image_size={self.image_size} not divisible by tubelet {h}x{w}")
        if self.dim % self.heads:
            raise InvalidArgumentError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.predictor_dim % self.predictor_heads:
            raise InvalidArgumentError(
                f"predictor_dim={self.predictor_dim} not divisible by "
                f"predictor_heads={self.predictor_heads}")


@dataclass
class MaskConfig:
    ratio: float = 0.5
    n_blocks: int = 2
    block_aspect: tuple = (0.75, 1.5)
    tolerance: float = 0.05
    max_tries: int = 1000


@dataclass
class ScheduleConfig:
    total_steps: int = 1000
    warmup_steps: Optional[int] = None  # None -> 10% of total_steps
    batch_size: int = 8
    base_lr: float = 1e-3
    initial_wd: float = 0.01
    final_wd: float = 0.1
    ema_momentum: float = 0.998
    ema_momentum_final: Optional[float] = None  # set for a linear ramp
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    checkpoint_every: int = 250

    @property
    def resolved_warmup(self) -> int:
        if self.warmup_steps is None:
            return self.total_steps // 10
        return self.warmup_steps


@dataclass
class PipelineConfig:
    fps: float = 16.0
    snippet_len: float = 1.0
    snippet_stride: float = 0.5
    bbox_expand_factor: float = 1.25
    crop_scale: tuple = (0.3, 1.0)
    crop_aspect: tuple = (0.75, 1.35)
    segment_frames: int = 8
    temporal_stride: int = 1
    window_seconds: float = 0.5
    expand_frame_task_boxes: bool = True
    pixel_mean: tuple = (0.485, 0.456, 0.406)
    pixel_std: tuple = (0.229, 0.224, 0.225)
    num_workers: int = 0


@dataclass
class ProbeConfig:
    head: str = "attention"  # "attention" | "full"
    num_heads: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_epochs: int = 30
    patience: int = 5
    batch_size: int = 16
    decision_threshold: float = 0.5
    prob_eps: float = 1e-7
    class_weights: Optional[list] = None


@dataclass
class SyntheticSpec:
    n_videos: int = 300
    duration: float = 2.0
    fps: float = 16.0
    frame_size: int = 96
    n_classes: int = 2
    patterns: Optional[tuple] = None  # motion pattern per class; default: the first n_classes
    half_period: float = 4.0
    horizontal: bool = True  # headings restricted to left/right
    object_size: tuple = (10, 16)
    speed: tuple = (1.5, 2.5)  # pixels per frame
    snippet_frames: int = 8
    split: tuple = (200, 50, 50)
    noise: float = 3.0
    seed: int = 0


@dataclass
class ExperimentConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0
    preset: str = "desk"

    def validate(self) -> None:
        self.model.validate()
        p, s = self.pipeline, self.schedule
        if p.segment_frames % p.temporal_stride:
            raise InvalidArgumentError("segment_frames must be divisible by temporal_stride")
        if p.segment_frames // p.temporal_stride != self.model.frames:
            raise InvalidArgumentError(
                f"segment_frames/temporal_stride = {p.segment_frames // p.temporal_stride} "
                f"but the encoder expects {self.model.frames} frames")
        if p.bbox_expand_factor < 1:
            raise InvalidArgumentError("bbox_expand_factor must be >= 1")
        if p.snippet_len <= 0 or p.snippet_stride <= 0 or p.fps <= 0:
            raise InvalidArgumentError("snippet_len, snippet_stride and fps must be positive")
        if not 0 < self.mask.ratio < 1:
            raise InvalidArgumentError("mask ratio must lie in (0, 1)")
        if s.total_steps <= 0 or not 0 <= s.resolved_warmup < s.total_steps:
            raise InvalidArgumentError("need 0 <= warmup_steps < total_steps")
        if self.probe.head not in ("attention", "full"):
            raise InvalidArgumentError(f"unknown probe head {self.probe.head!r}")
        if self.probe.max_epochs <= 0:
            raise InvalidArgumentError("probe.max_epochs must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _from_dict(cls, data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise InvalidArgumentError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = cls.from_dict(data)
        cfg.validate()
        return cfg


def _from_dict(cls, data: dict) -> Any:
    if not isinstance(data, dict):
        raise InvalidArgumentError(f"expected a mapping for {cls.__name__}, got {data!r}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidArgumentError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            value = _from_dict(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def desk_preset() -> ExperimentConfig:
    """Tiny CPU-scale configuration used by tests and the synthetic benchmark."""
    cfg = ExperimentConfig()
    cfg.validate()
    return cfg


def reference_preset() -> ExperimentConfig:
    """ViT-L reference scale: 16x224x224 clips, 14.4k steps at batch 80, lr 6e-6."""
    cfg = ExperimentConfig(
        model=EncoderConfig.vit_large(),
        schedule=ScheduleConfig(total_steps=14_400, batch_size=80, base_lr=6e-6,
                                initial_wd=0.01, final_wd=0.1, checkpoint_every=1000),
        pipeline=PipelineConfig(fps=32.0, snippet_len=3.0, snippet_stride=1.5,
                                segment_frames=64, temporal_stride=4, window_seconds=2.0),
        probe=ProbeConfig(num_heads=16),
        preset="reference",
    )
    cfg.validate()
    return cfg


PRESETS = {"desk": desk_preset, "reference": reference_preset}
