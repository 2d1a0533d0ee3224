"""Video storage and the streams that feed pretraining and probing."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import manifests
from .config import ExperimentConfig
from .errors import CheckpointError, InvalidArgumentError
from .pipeline import (BoundingBox, SnippetIndexEntry, VideoSnippet, build_pretrain_sample,
                       chunk_video, normalize, snippet_rng)

logger = logging.getLogger(__name__)


class VideoStore:
    """Videos listed in ``videos.jsonl`` under ``root``.

    ``.npy`` entries are memory-mapped uint8 ``(T, H, W, 3)`` arrays; other files
    are decoded with OpenCV (optional dependency) and cached.
    """

    def __init__(self, root):
        self.root = Path(root)
        _, rows = manifests.read_jsonl(self.root / "videos.jsonl", manifests.VIDEOS)
        self.meta = {r["source_id"]: r for r in rows}
        self._cache = {}

    def __len__(self):
        return len(self.meta)

    def __contains__(self, source_id):
        return source_id in self.meta

    def source_ids(self):
        return list(self.meta)

    def fps(self, source_id: str) -> float:
        return float(self.meta[source_id]["fps"])

    def duration(self, source_id: str) -> float:
        m = self.meta[source_id]
        return m["n_frames"] / float(m["fps"])

    def frames(self, source_id: str) -> np.ndarray:
        if source_id not in self.meta:
            raise InvalidArgumentError(f"unknown video {source_id!r}")
        if source_id not in self._cache:
            path = self.root / self.meta[source_id]["file"]
            if not path.is_file():
                raise CheckpointError(f"video file missing: {path}")
            if path.suffix == ".npy":
                arr = np.load(path, mmap_mode="r")
            else:
                arr = _decode_video(path)
            self._cache[source_id] = arr
        return self._cache[source_id]

    def video(self, source_id: str) -> VideoSnippet:
        return VideoSnippet(np.asarray(self.frames(source_id)), self.fps(source_id), source_id, 0.0)

    def start_frame(self, source_id: str, start: float) -> int:
        return int(round(start * self.fps(source_id)))

    def snippet(self, source_id: str, start: float, length: float) -> VideoSnippet:
        fps = self.fps(source_id)
        f0 = int(round(start * fps))
        n = int(round(length * fps))
        frames = np.asarray(self.frames(source_id)[f0:f0 + n])
        return VideoSnippet(frames, fps, source_id, f0 / fps)


def _decode_video(path: Path) -> np.ndarray:
    try:
        import cv2
    except ImportError as exc:
        raise InvalidArgumentError(
            f"decoding {path.suffix} videos needs opencv-python-headless") from exc
    cap = cv2.VideoCapture(str(path))
    frames = []
    ok, frame = cap.read()
    while ok:
        frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
        ok, frame = cap.read()
    cap.release()
    if not frames:
        raise CheckpointError(f"could not decode any frame from {path}")
    return np.stack(frames)


def build_snippet_index(store: VideoStore, detections: dict, snippet_len: float,
                        stride: float) -> list:
    """Chunk every video and flag snippets whose center frame has a detection."""
    entries = []
    for sid in store.source_ids():
        for start in chunk_video(store.duration(sid), snippet_len, stride):
            center = store.start_frame(sid, start) + int(round(snippet_len * store.fps(sid))) // 2
            det = detections.get((sid, center))
            entries.append(SnippetIndexEntry(sid, start, snippet_len, bool(det and det.boxes)))
    return entries


class PretrainClipStream:
    """Deterministic batches of pretraining clips.

    The batch for a step depends only on ``(seed, step)``, which makes resumed
    runs reproduce uninterrupted ones and lets workers run in any order.
    """

    def __init__(self, cfg: ExperimentConfig, store: VideoStore, entries, detections: dict):
        self.cfg = cfg
        self.store = store
        self.detections = detections
        self.entries = [e for e in entries if e.has_detection]
        if not self.entries:
            raise InvalidArgumentError("no snippet with a detection: dataset is empty after discards")
        self._pool = (ThreadPoolExecutor(cfg.pipeline.num_workers)
                      if cfg.pipeline.num_workers > 0 else None)

    def _center_detection(self, e: SnippetIndexEntry):
        center = (self.store.start_frame(e.source_id, e.snippet_start)
                  + int(round(e.snippet_len * self.store.fps(e.source_id))) // 2)
        return self.detections.get((e.source_id, center))

    def sample(self, e: SnippetIndexEntry, draw: int) -> Optional[np.ndarray]:
        cfg = self.cfg
        v = self.store.snippet(e.source_id, e.snippet_start, e.snippet_len)
        rng = snippet_rng(cfg.seed, e.source_id, e.snippet_start, draw)
        clip = build_pretrain_sample(v, self._center_detection(e), rng, cfg.pipeline,
                                     cfg.model.image_size)
        if clip is None:
            return None
        return normalize(clip.frames, cfg.pipeline.pixel_mean, cfg.pipeline.pixel_std)

    def batch(self, step: int) -> torch.Tensor:
        B = self.cfg.schedule.batch_size
        rng = np.random.default_rng([self.cfg.seed, step, 0])
        clips, draw = [], step * 1_000_003
        for _ in range(50):
            need = B - len(clips)
            picks = [(self.entries[int(rng.integers(len(self.entries)))], draw + i)
                     for i in range(need)]
            draw += need
            if self._pool is not None:
                results = list(self._pool.map(lambda a: self.sample(*a), picks))
            else:
                results = [self.sample(*a) for a in picks]
            clips.extend(r for r in results if r is not None)
            if len(clips) == B:
                return torch.from_numpy(np.stack(clips))
        raise InvalidArgumentError(f"could not assemble a batch at step {step}: too many discards")


@dataclass
class LabeledSample:
    """One supervised query: a snippet (or a time point) plus its box(es) and label."""

    sample_id: str
    source_id: str
    label: np.ndarray
    task: str  # "single" | "multi"
    boxes: list  # per-frame boxes (snippet task) or [box at t] (frame task)
    split: str = "train"
    start_frame: int = 0
    n_frames: int = 0
    t: Optional[float] = None

    def __post_init__(self):
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.label.ndim != 1 or self.label.size < 2:
            raise InvalidArgumentError(f"{self.sample_id}: need a label vector with C > 1 entries")
        if not np.isin(self.label, (0, 1)).all():
            raise InvalidArgumentError(f"{self.sample_id}: labels must be 0/1")
        if self.task == "single" and self.label.sum() != 1:
            raise InvalidArgumentError(f"{self.sample_id}: single-label sample must be one-hot")
        if self.task not in ("single", "multi"):
            raise InvalidArgumentError(f"unknown task {self.task!r}")


def read_labels(path) -> tuple:
    """Return ``(header, [LabeledSample])`` from a label manifest."""
    header, rows = manifests.read_jsonl(path, manifests.LABELS)
    samples = []
    for r in rows:
        if r["task"] == "single":
            boxes = [BoundingBox(*b) for b in r["boxes"]]
            samples.append(LabeledSample(r["sample_id"], r["source_id"], r["label"], "single",
                                         boxes, r.get("split", "train"), int(r["start_frame"]),
                                         int(r["n_frames"])))
        else:
            samples.append(LabeledSample(r["sample_id"], r["source_id"], r["label"], "multi",
                                         [BoundingBox(*r["box"])], r.get("split", "train"),
                                         t=float(r["t"])))
    return header, samples
