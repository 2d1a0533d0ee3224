"""Synthetic moving-shape videos with oracle boxes.

Each video holds one textured shape over a static noisy background.  The class
is defined by how the shape moves, never by how it looks, so a classifier has
to use temporal information.  The generator also writes an exact detection
manifest and label manifests for both task kinds.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import manifests
from .config import SyntheticSpec
from .errors import InvalidArgumentError
from .pipeline import BoundingBox, DetectionRecord

logger = logging.getLogger(__name__)

# drift: constant velocity along a random heading.
# oscillate: triangle wave along a random axis (reverses every few frames).
# circle: constant angular speed around a center.
# zigzag: drift with a perpendicular triangle wobble.
# pulse: stop-and-go drift.
# still: small random jitter around a fixed point.
MOTION_PATTERNS = ("drift", "oscillate", "circle", "zigzag", "pulse", "still")
GROUPS = ("Locomotion", "Object", "Social", "Other")


def _triangle(phase: np.ndarray) -> np.ndarray:
    """Unit-speed triangle wave with period 2, values in [0, 1]."""
    p = np.mod(phase, 2.0)
    return np.where(p < 1.0, p, 2.0 - p)


def trajectory(pattern: str, n_frames: int, speed: float, rng: np.random.Generator,
               half_period: float = 6.0, horizontal: bool = False) -> np.ndarray:
    """Displacement ``(n_frames, 2)`` of the shape's top-left corner, starting at 0.

    ``horizontal`` restricts the heading to left or right.
    """
    t = np.arange(n_frames, dtype=np.float64)
    if horizontal:
        theta = float(rng.choice([0.0, np.pi]))
        u = np.array([1.0 if theta == 0.0 else -1.0, 0.0])
    else:
        theta = rng.uniform(0, 2 * np.pi)
        u = np.array([math.cos(theta), math.sin(theta)])
    if pattern == "drift":
        d = np.outer(t * speed, u)
    elif pattern == "oscillate":
        # twice the base speed: the excursion over one full period equals the
        # distance a drift covers in the same time, so clip extents match
        phase = rng.uniform(0, 2)
        amp = 2 * half_period * speed
        along = amp * (_triangle(t / half_period + phase) - _triangle(np.array([phase]))[0])
        d = np.outer(along, u)
    elif pattern == "circle":
        radius = speed * 8.0
        w = speed / radius * rng.choice([-1, 1])
        ang = theta + w * t
        d = radius * np.stack([np.cos(ang) - math.cos(theta), np.sin(ang) - math.sin(theta)], 1)
    elif pattern == "zigzag":
        perp = np.array([-u[1], u[0]])
        wob = half_period * speed * _triangle(t / half_period)
        d = np.outer(t * speed * 0.7, u) + np.outer(wob, perp)
    elif pattern == "pulse":
        moving = (np.floor(t / half_period) % 2 == 0).astype(float)
        d = np.outer(np.concatenate([[0.0], np.cumsum(moving[:-1])]) * speed * 1.5, u)
    elif pattern == "still":
        d = rng.normal(0, 0.3, size=(n_frames, 2))
        d -= d[0]
    else:
        raise InvalidArgumentError(f"unknown motion pattern {pattern!r}")
    return d


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(j + 1, hi) - np.maximum(j, lo), 0.0, 1.0)


def shape_alpha(x0: float, y0: float, size: float, frame: int, disc: bool) -> np.ndarray:
    """Anti-aliased coverage of the shape whose bounding box is ``(x0, y0, x0+size, y0+size)``."""
    if not disc:
        return np.outer(_coverage(y0, y0 + size, frame), _coverage(x0, x0 + size, frame))
    # 4x4 supersampling inside the pixel
    offs = (np.arange(4) + 0.5) / 4
    c = np.arange(frame)[:, None] + offs[None, :]
    cx, cy, r = x0 + size / 2, y0 + size / 2, size / 2
    dy = (c[:, None, :, None] - cy) ** 2
    dx = (c[None, :, None, :] - cx) ** 2
    return ((dx + dy) <= r * r).mean(axis=(2, 3))


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(60, 190, size=(size // 8 + 2, size // 8 + 2, 3))
    # bilinear upsampling of a coarse random grid, same taps on both axes
    pos = np.linspace(0, coarse.shape[0] - 1.001, size)
    i0 = pos.astype(int)
    f = pos - i0
    rows = coarse[i0] * (1 - f[:, None, None]) + coarse[i0 + 1] * f[:, None, None]
    return rows[:, i0] * (1 - f[None, :, None]) + rows[:, i0 + 1] * f[None, :, None]


def render_video(pattern: str, spec: SyntheticSpec, rng: np.random.Generator):
    """Render one video; returns ``(frames uint8 (T,S,S,3), boxes (T,4))``."""
    n = int(round(spec.duration * spec.fps))
    S = spec.frame_size
    size = rng.uniform(*spec.object_size)
    speed = rng.uniform(*spec.speed)
    disp = trajectory(pattern, n, speed, rng, spec.half_period, spec.horizontal)
    lo = -disp.min(axis=0)
    hi = S - size - disp.max(axis=0)
    if np.any(hi < lo):
        raise InvalidArgumentError(
            f"{pattern} trajectory at speed {speed:.2f} does not fit a {S}px frame")
    start = rng.uniform(lo, hi)
    pos = start + disp

    disc = bool(rng.integers(2))
    color_a = rng.uniform(0, 255, 3)
    color_b = 255 - color_a
    stripe = rng.uniform(2.5, 4.0)
    bg = _background(rng, S)
    frames = np.empty((n, S, S, 3), dtype=np.uint8)
    centers = np.arange(S) + 0.5
    for i, (x, y) in enumerate(pos):
        alpha = shape_alpha(x, y, size, S, disc)[..., None]
        stripes = (np.floor((centers[None, :] - x + (centers[:, None] - y)) / stripe) % 2)[..., None]
        obj = np.where(stripes > 0, color_a, color_b)
        img = bg * (1 - alpha) + obj * alpha + rng.normal(0, spec.noise, (S, S, 3))
        frames[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    boxes = np.concatenate([pos, pos + size], axis=1)
    return frames, boxes


def class_names(n_classes: int, patterns=None) -> list:
    if patterns is not None:
        names = list(patterns)
        if len(names) != n_classes or len(set(names)) != n_classes:
            raise InvalidArgumentError(f"need {n_classes} distinct motion patterns, got {names}")
        unknown = set(names) - set(MOTION_PATTERNS)
        if unknown:
            raise InvalidArgumentError(f"unknown motion patterns {sorted(unknown)}")
        return names
    if not 2 <= n_classes <= len(MOTION_PATTERNS):
        raise InvalidArgumentError(f"n_classes must be in [2, {len(MOTION_PATTERNS)}]")
    return list(MOTION_PATTERNS[:n_classes])


def class_groups(names) -> dict:
    return {name: GROUPS[i % len(GROUPS)] for i, name in enumerate(names)}


def generate(spec: SyntheticSpec, out_dir, *, force: bool = False) -> Path:
    """Write a synthetic dataset directory.

    Layout::

        videos/<id>.npy        uint8 frames (T, S, S, 3)
        videos.jsonl           source_id, fps, n_frames, size, file
        detections.jsonl       oracle boxes for every frame (confidence 1.0)
        snippet_labels.jsonl   one single-label clip per video (``snippet_frames`` frames)
        frame_labels.jsonl     one multi-label (box, time) query per video
        synthetic_spec.json
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise InvalidArgumentError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out)
    names = class_names(spec.n_classes, spec.patterns)
    if sum(spec.split) != spec.n_videos:
        raise InvalidArgumentError(f"split {spec.split} does not sum to n_videos={spec.n_videos}")
    (out / "videos").mkdir(parents=True)

    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.n_videos) % spec.n_classes
    rng.shuffle(labels)
    split_names = np.repeat(["train", "val", "test"], spec.split)
    n_frames = int(round(spec.duration * spec.fps))
    if spec.snippet_frames > n_frames:
        raise InvalidArgumentError("snippet_frames longer than the video")

    videos, detections, snippet_rows, frame_rows = [], [], [], []
    for i in range(spec.n_videos):
        vid_rng = np.random.default_rng([spec.seed, i])
        sid = f"syn{i:05d}"
        pattern = names[labels[i]]
        frames, boxes = render_video(pattern, spec, vid_rng)
        np.save(out / "videos" / f"{sid}.npy", frames)
        videos.append({"source_id": sid, "fps": spec.fps, "n_frames": int(frames.shape[0]),
                       "height": spec.frame_size, "width": spec.frame_size,
                       "file": f"videos/{sid}.npy"})
        for f, b in enumerate(boxes):
            detections.append(DetectionRecord(sid, f, [(BoundingBox(*map(float, b)), 1.0)]))

        start = int(vid_rng.integers(0, n_frames - spec.snippet_frames + 1))
        one_hot = [int(c == labels[i]) for c in range(spec.n_classes)]
        snippet_rows.append({
            "sample_id": f"{sid}_s", "source_id": sid, "split": str(split_names[i]),
            "task": "single", "label": one_hot, "start_frame": start,
            "n_frames": spec.snippet_frames,
            "boxes": [list(map(float, b)) for b in boxes[start:start + spec.snippet_frames]],
        })
        f = int(vid_rng.integers(0, n_frames))
        frame_rows.append({
            "sample_id": f"{sid}_f", "source_id": sid, "split": str(split_names[i]),
            "task": "multi", "label": one_hot, "t": (f + 0.5) / spec.fps, "frame_index": f,
            "box": list(map(float, boxes[f])),
        })

    header = {"class_names": names, "groups": class_groups(names)}
    manifests.write_jsonl(out / "videos.jsonl", manifests.VIDEOS, videos)
    manifests.write_detections(out / "detections.jsonl", detections, detector="synthetic-oracle",
                               threshold=0.2, prompt="")
    manifests.write_jsonl(out / "snippet_labels.jsonl", manifests.LABELS, snippet_rows, **header)
    manifests.write_jsonl(out / "frame_labels.jsonl", manifests.LABELS, frame_rows, **header)
    (out / "synthetic_spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    logger.info("wrote %d synthetic videos to %s", spec.n_videos, out)
    return out
