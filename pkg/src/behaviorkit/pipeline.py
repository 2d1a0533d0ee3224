"""Video snippet geometry: chunking, box expansion, random crops, resizing and
temporal sampling for pretraining and classification clips."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .config import PipelineConfig
from .errors import InvalidArgumentError, NoValidCropError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in continuous pixel coordinates (pixel ``j`` spans ``[j, j+1]``)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidArgumentError(f"non-finite box coordinates {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidArgumentError(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.x1, self.y1)

    def clip(self, frame_w: float, frame_h: float) -> Optional["BoundingBox"]:
        """Intersection with the frame, or ``None`` when it has no area."""
        x0, y0 = max(self.x0, 0.0), max(self.y0, 0.0)
        x1, y1 = min(self.x1, float(frame_w)), min(self.y1, float(frame_h))
        if x1 <= x0 or y1 <= y0:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and self.x1 >= other.x1 and self.y1 >= other.y1)


@dataclass
class VideoSnippet:
    frames: np.ndarray  # (T, H, W, 3) uint8
    fps: float
    source_id: str = ""
    start_time: float = 0.0

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[-1] != 3:
            raise InvalidArgumentError(f"frames must be (T, H, W, 3), got {f.shape}")
        if f.dtype != np.uint8:
            raise InvalidArgumentError(f"frames must be uint8, got {f.dtype}")
        if f.shape[0] < 1 or f.shape[1] < 16 or f.shape[2] < 16:
            raise InvalidArgumentError(f"snippet too small: {f.shape}")
        if not self.fps > 0:
            raise InvalidArgumentError(f"fps must be positive, got {self.fps}")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    @property
    def end_time(self) -> float:
        return self.start_time + self.duration


@dataclass
class DetectionRecord:
    source_id: str
    frame_index: int
    boxes: list = field(default_factory=list)  # [(BoundingBox, confidence)], best first

    def __post_init__(self):
        for _, conf in self.boxes:
            if not 0.0 <= conf <= 1.0:
                raise InvalidArgumentError(f"confidence {conf} outside [0, 1]")
        confs = [c for _, c in self.boxes]
        if confs != sorted(confs, reverse=True):
            self.boxes = sorted(self.boxes, key=lambda bc: -bc[1])


@dataclass(frozen=True)
class SnippetIndexEntry:
    source_id: str
    snippet_start: float
    snippet_len: float
    has_detection: bool = True

    def __post_init__(self):
        if not self.snippet_len > 0:
            raise InvalidArgumentError("snippet_len must be positive")


def chunk_video(duration: float, snippet_len: float, stride: float) -> list:
    """Start times of the fixed-length snippets that fit entirely in the video."""
    if not snippet_len > 0 or not stride > 0:
        raise InvalidArgumentError("snippet_len and stride must be positive")
    if duration < 0:
        raise InvalidArgumentError("duration must be non-negative")
    if duration < snippet_len:
        return []
    # tolerance absorbs float error in (duration - len) / stride landing just below an integer
    n = int(math.floor((duration - snippet_len) / stride + 1e-9)) + 1
    return [i * stride for i in range(n)]


def expand_bbox(b: BoundingBox, factor: float) -> BoundingBox:
    """Scale width and height by ``factor`` about the box center."""
    if factor < 1:
        raise InvalidArgumentError(f"expansion factor must be >= 1, got {factor}")
    if not b.area > 0:
        raise InvalidArgumentError("cannot expand a degenerate box")
    cx, cy = b.center
    hw, hh = b.width * factor / 2, b.height * factor / 2
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


def union_bboxes(boxes: Sequence[BoundingBox]) -> BoundingBox:
    if len(boxes) == 0:
        raise InvalidArgumentError("union of an empty box list")
    return BoundingBox(min(b.x0 for b in boxes), min(b.y0 for b in boxes),
                       max(b.x1 for b in boxes), max(b.y1 for b in boxes))


def sample_crop_box(b: BoundingBox, frame_w: int, frame_h: int, rng: np.random.Generator,
                    scale=(0.3, 1.0), aspect=(0.75, 1.35)) -> BoundingBox:
    """Random-resized-crop style box inside ``b`` (clipped to the frame).

    The crop area is ``s * area(b & frame)`` with ``s ~ U(scale)`` and its aspect
    ratio is the clipped box's aspect times ``a ~ U(aspect)``.  Along an axis where
    the crop fits inside the box its offset is uniform; otherwise it is centered.
    Four draws are consumed per call regardless of the branch taken.
    """
    clipped = b.clip(frame_w, frame_h)
    if clipped is None:
        raise NoValidCropError(f"box {b.as_tuple()} lies outside the {frame_w}x{frame_h} frame")
    s = rng.uniform(*scale)
    a = rng.uniform(*aspect)
    ux, uy = rng.uniform(), rng.uniform()

    target_area = s * clipped.area
    target_aspect = clipped.width / clipped.height * a
    w = math.sqrt(target_area * target_aspect)
    h = math.sqrt(target_area / target_aspect)

    cx, cy = clipped.center
    x0 = clipped.x0 + ux * (clipped.width - w) if w <= clipped.width else cx - w / 2
    y0 = clipped.y0 + uy * (clipped.height - h) if h <= clipped.height else cy - h / 2
    out = BoundingBox(x0, y0, x0 + w, y0 + h).clip(frame_w, frame_h)
    if out is None:
        raise NoValidCropError("jittered crop left the frame")
    return out


def _bilinear_taps(lo: float, hi: float, n_out: int, n_in: int):
    # half-pixel (align_corners=False) sample positions, clamped to the border
    pos = lo + (np.arange(n_out) + 0.5) * ((hi - lo) / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (pos - i0).astype(np.float32)
    return i0, i1, frac


def crop_resize(v: VideoSnippet, b: BoundingBox, out_hw: int) -> VideoSnippet:
    """Crop every frame to ``b`` (clipped to the frame) and resize bilinearly."""
    clipped = b.clip(v.width, v.height)
    if clipped is None:
        raise NoValidCropError(f"box {b.as_tuple()} has no overlap with the frame")
    y0, y1, fy = _bilinear_taps(clipped.y0, clipped.y1, out_hw, v.height)
    x0, x1, fx = _bilinear_taps(clipped.x0, clipped.x1, out_hw, v.width)

    frames = v.frames.astype(np.float32)
    fy = fy[None, :, None, None]
    rows = frames[:, y0] * (1 - fy) + frames[:, y1] * fy
    fx = fx[None, None, :, None]
    out = rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return replace(v, frames=out)


def frame_indices(start: int, segment_len: int, stride: int) -> np.ndarray:
    return np.arange(start, start + segment_len, stride)


def sample_frames(v: VideoSnippet, segment_len: int, stride: int,
                  rng: np.random.Generator) -> VideoSnippet:
    """Random ``segment_len``-frame window subsampled every ``stride`` frames.

    Snippets shorter than the window are first padded by repeating the last frame.
    """
    if segment_len <= 0 or stride <= 0 or segment_len % stride:
        raise InvalidArgumentError(
            f"segment_len={segment_len} must be a positive multiple of stride={stride}")
    frames = v.frames
    if frames.shape[0] < segment_len:
        pad = np.repeat(frames[-1:], segment_len - frames.shape[0], axis=0)
        frames = np.concatenate([frames, pad], axis=0)
    start = int(rng.integers(0, frames.shape[0] - segment_len + 1))
    idx = frame_indices(start, segment_len, stride)
    return VideoSnippet(frames=frames[idx], fps=v.fps / stride, source_id=v.source_id,
                        start_time=v.start_time + start / v.fps)


def centered_window(v_star: VideoSnippet, t: float, window: float) -> VideoSnippet:
    """``window``-second clip centered at absolute time ``t``; shifted inside the video
    at the boundaries rather than padded."""
    n = int(round(window * v_star.fps))
    if n < 1:
        raise InvalidArgumentError(f"window {window}s is shorter than one frame")
    if n > v_star.n_frames:
        raise InvalidArgumentError(
            f"window of {n} frames is longer than the video ({v_star.n_frames} frames)")
    if not v_star.start_time - 1e-9 <= t <= v_star.end_time + 1e-9:
        raise InvalidArgumentError(
            f"t={t} outside video span [{v_star.start_time}, {v_star.end_time}]")
    start = int(round((t - v_star.start_time) * v_star.fps - n / 2))
    start = min(max(start, 0), v_star.n_frames - n)
    return VideoSnippet(frames=v_star.frames[start:start + n], fps=v_star.fps,
                        source_id=v_star.source_id,
                        start_time=v_star.start_time + start / v_star.fps)


def build_pretrain_sample(v: VideoSnippet, detections: Optional[DetectionRecord],
                          rng: np.random.Generator, cfg: PipelineConfig,
                          out_hw: int) -> Optional[VideoSnippet]:
    """One pretraining clip from a snippet and its center-frame detections.

    Returns ``None`` (discard) when nothing was detected or no valid crop exists.
    """
    if detections is None or not detections.boxes:
        logger.debug("discard %s@%.2f: no detections", v.source_id, v.start_time)
        return None
    box, _ = detections.boxes[int(rng.integers(len(detections.boxes)))]
    try:
        box = expand_bbox(box, cfg.bbox_expand_factor)
        crop = sample_crop_box(box, v.width, v.height, rng,
                               scale=cfg.crop_scale, aspect=cfg.crop_aspect)
        clip = crop_resize(v, crop, out_hw)
    except NoValidCropError as exc:
        logger.info("discard %s@%.2f: %s", v.source_id, v.start_time, exc)
        return None
    return sample_frames(clip, cfg.segment_frames, cfg.temporal_stride, rng)


def normalize(frames: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """uint8 frames -> float32, scaled to [0, 1] then standardized per channel."""
    x = frames.astype(np.float32) / 255.0
    return (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)


def snippet_rng(global_seed: int, source_id: str, snippet_start: float, draw: int = 0):
    """Generator keyed on the sample identity, so parallel workers need no shared state."""
    key = f"{global_seed}|{source_id}|{snippet_start:.6f}|{draw}".encode()
    digest = hashlib.sha256(key).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))
