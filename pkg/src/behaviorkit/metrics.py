"""Behavior-recognition metrics.

Single-label protocol: Top-1 and class-average accuracy.  Multi-label protocol:
per-class average precision computed the way the AVA evaluation code does it
(descending-score sweep, VOC-style monotone precision envelope), averaged into
mAP overall and per category group.

Ranking ties are broken by sample id (stable), argmax ties by lowest class index.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class PredictionRecord:
    sample_id: str
    scores: np.ndarray
    ground_truth: np.ndarray
    class_names: Sequence[str] = ()
    group_of_class: Optional[dict] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.ground_truth = np.asarray(self.ground_truth)
        if not np.all(np.isfinite(self.scores)):
            raise InvalidArgumentError(f"{self.sample_id}: non-finite scores")
        if self.class_names and len(self.class_names) != self.scores.size:
            raise InvalidArgumentError(f"{self.sample_id}: {self.scores.size} scores for "
                                       f"{len(self.class_names)} classes")


@dataclass
class MetricsReport:
    n_samples: int = 0
    top1: Optional[float] = None
    class_avg: Optional[float] = None
    mAP: Optional[float] = None
    per_class: dict = field(default_factory=dict)
    group_mAP: dict = field(default_factory=dict)
    skipped_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        """Human-readable report; percentages with two decimals."""
        lines = [f"samples: {self.n_samples}"]
        for name in ("top1", "class_avg", "mAP"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name:<12}{format_percent(value):>8}")
        for group, value in sorted(self.group_mAP.items()):
            lines.append(f"mAP[{group}]".ljust(12) + f"{format_percent(value):>8}")
        if self.per_class:
            lines.append("per class:")
            lines.extend(f"  {name:<20}{format_percent(v):>8}" for name, v in self.per_class.items())
        if self.skipped_classes:
            lines.append("skipped (no positives): " + ", ".join(self.skipped_classes))
        return "\n".join(lines) + "\n"


def format_percent(value: Optional[float]) -> str:
    return "—" if value is None else f"{100 * value:.2f}"


def _stack(preds):
    if isinstance(preds, dict):
        ids, scores, labels = preds["sample_ids"], preds["scores"], preds["labels"]
    else:
        preds = list(preds)
        if not preds:
            raise InvalidArgumentError("empty prediction list")
        ids = [p.sample_id for p in preds]
        scores = np.stack([p.scores for p in preds])
        labels = np.stack([p.ground_truth for p in preds])
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise InvalidArgumentError("empty prediction list")
    if scores.shape != labels.shape:
        raise InvalidArgumentError(f"scores {scores.shape} vs labels {labels.shape}")
    return list(ids), scores, labels


def _single_label_targets(labels: np.ndarray) -> np.ndarray:
    if labels.ndim == 2:
        if not np.all(labels.sum(axis=1) == 1):
            raise InvalidArgumentError("top-1 metrics need exactly one positive label per sample")
        return labels.argmax(axis=1)
    return labels.astype(np.int64)


def top1_accuracy(preds) -> float:
    _, scores, labels = _stack(preds)
    return float(np.mean(scores.argmax(axis=1) == _single_label_targets(labels)))


def per_class_accuracy(preds) -> dict:
    """``{class index: accuracy}`` over classes that occur in the ground truth."""
    _, scores, labels = _stack(preds)
    truth = _single_label_targets(labels)
    hit = scores.argmax(axis=1) == truth
    return {int(c): float(hit[truth == c].mean()) for c in np.unique(truth)}


def class_average_accuracy(preds) -> float:
    return float(np.mean(list(per_class_accuracy(preds).values())))


def _ranking(scores: np.ndarray, sample_ids) -> np.ndarray:
    keys = np.arange(scores.size) if sample_ids is None else np.asarray(sample_ids)
    return np.lexsort((keys, -scores))


def average_precision(scores, labels, sample_ids=None) -> float:
    """AP of one class: precision envelope integrated over recall steps."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidArgumentError("scores and labels must be equal-length vectors")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise InvalidArgumentError("average precision is undefined without positives")
    hits = labels[_ranking(scores, sample_ids)]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    recall = tp / n_pos

    precision = np.concatenate([[0.0], precision, [0.0]])
    recall = np.concatenate([[0.0], recall, [1.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1]) + 1
    return float(np.sum((recall[steps] - recall[steps - 1]) * precision[steps]))


def ava_map(preds, class_names=None, group_of_class=None) -> MetricsReport:
    """Per-class AP, their unweighted mean, and group means.  Classes without a
    positive sample are skipped and listed in the report."""
    ids, scores, labels = _stack(preds)
    C = scores.shape[1]
    if class_names is None:
        if isinstance(preds, dict):
            class_names = preds.get("class_names")
        elif preds and getattr(preds[0], "class_names", None):
            class_names = list(preds[0].class_names)
    class_names = list(class_names) if class_names else [str(c) for c in range(C)]
    if group_of_class is None:
        if isinstance(preds, dict):
            group_of_class = preds.get("groups") or None
        elif preds and preds[0].group_of_class:
            group_of_class = preds[0].group_of_class

    per_class, skipped = {}, []
    for c, name in enumerate(class_names):
        if labels[:, c].sum() == 0:
            skipped.append(name)
            continue
        per_class[name] = average_precision(scores[:, c], labels[:, c], ids)
    if not per_class:
        raise InvalidArgumentError("no class has a positive sample")

    groups = {}
    for name, ap in per_class.items():
        if group_of_class and name in group_of_class:
            groups.setdefault(group_of_class[name], []).append(ap)
    return MetricsReport(n_samples=len(ids), mAP=float(np.mean(list(per_class.values()))),
                         per_class=per_class,
                         group_mAP={g: float(np.mean(v)) for g, v in sorted(groups.items())},
                         skipped_classes=skipped)


def accuracy_report(preds, class_names=None) -> MetricsReport:
    ids, scores, labels = _stack(preds)
    if class_names is None and isinstance(preds, dict):
        class_names = preds.get("class_names")
    names = list(class_names) if class_names else [str(c) for c in range(scores.shape[1])]
    pc = per_class_accuracy(preds)
    return MetricsReport(n_samples=len(ids), top1=top1_accuracy(preds),
                         class_avg=float(np.mean(list(pc.values()))),
                         per_class={names[c]: v for c, v in pc.items()})


def evaluate(preds: dict) -> MetricsReport:
    """Report for a prediction dump as returned by ``manifests.read_predictions``."""
    if preds.get("task") == "multi":
        return ava_map(preds)
    return accuracy_report(preds)
