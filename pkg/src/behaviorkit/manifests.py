"""Line-delimited JSON manifests.

Every file starts with a header line ``{"header": {...}}`` naming the record
kind and carrying provenance; each following line is one record.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import CheckpointError, InvalidArgumentError
from .pipeline import BoundingBox, DetectionRecord, SnippetIndexEntry

DETECTIONS = "detections"
SNIPPETS = "snippet-index"
PREDICTIONS = "predictions"
VIDEOS = "videos"
LABELS = "labels"


def write_jsonl(path, kind: str, records: Iterable[dict], **header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps({"header": {"kind": kind, "version": 1, **header}},
                            sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def read_jsonl(path, kind: Optional[str] = None) -> tuple:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"manifest not found: {path}")
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    try:
        rows = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest {path}: {exc}") from exc
    if not rows or "header" not in rows[0]:
        raise CheckpointError(f"manifest {path} has no header line")
    header = rows[0]["header"]
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path} holds {header.get('kind')!r} records, expected {kind!r}")
    return header, rows[1:]


def write_detections(path, records: Iterable[DetectionRecord], *, detector: str,
                     threshold: float, prompt: str = "") -> Path:
    rows = ({"source_id": r.source_id, "frame_index": int(r.frame_index),
             "boxes": [[*b.as_tuple(), float(c)] for b, c in r.boxes]} for r in records)
    return write_jsonl(path, DETECTIONS, rows, detector=detector, threshold=threshold,
                       prompt=prompt)


def read_detections(path) -> tuple:
    """Return ``(header, {(source_id, frame_index): DetectionRecord})``."""
    header, rows = read_jsonl(path, DETECTIONS)
    threshold = float(header.get("threshold", 0.0))
    out = {}
    for r in rows:
        boxes = []
        for x0, y0, x1, y1, conf in r["boxes"]:
            if conf < threshold:
                raise InvalidArgumentError(
                    f"{path}: confidence {conf} below manifest threshold {threshold}")
            boxes.append((BoundingBox(x0, y0, x1, y1), conf))
        rec = DetectionRecord(r["source_id"], int(r["frame_index"]), boxes)
        out[(rec.source_id, rec.frame_index)] = rec
    return header, out


def write_snippet_index(path, entries: Iterable[SnippetIndexEntry], **header) -> Path:
    rows = ({"source_id": e.source_id, "snippet_start": e.snippet_start,
             "snippet_len": e.snippet_len, "has_detection": e.has_detection} for e in entries)
    return write_jsonl(path, SNIPPETS, rows, **header)


def read_snippet_index(path) -> list:
    _, rows = read_jsonl(path, SNIPPETS)
    return [SnippetIndexEntry(r["source_id"], float(r["snippet_start"]),
                              float(r["snippet_len"]), bool(r["has_detection"])) for r in rows]


def write_predictions(path, sample_ids, scores, labels, *, class_names, task: str,
                      groups: Optional[dict] = None) -> Path:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    rows = ({"sample_id": str(sid), "scores": [float(s) for s in sc], "labels": [int(v) for v in lb]}
            for sid, sc, lb in zip(sample_ids, scores, labels))
    return write_jsonl(path, PREDICTIONS, rows, class_names=list(class_names), task=task,
                       groups=groups or {})


def read_predictions(path) -> dict:
    header, rows = read_jsonl(path, PREDICTIONS)
    if not rows:
        raise InvalidArgumentError(f"prediction dump {path} is empty")
    return {
        "sample_ids": [r["sample_id"] for r in rows],
        "scores": np.array([r["scores"] for r in rows], dtype=np.float64),
        "labels": np.array([r["labels"] for r in rows], dtype=np.int64),
        "class_names": header["class_names"],
        "task": header["task"],
        "groups": header.get("groups") or {},
    }
