"""Attentive classifier on top of a frozen video encoder.

A learnable query cross-attends over the encoder tokens; a linear layer maps the
result to class scores (softmax for single-label, sigmoid for multi-label).  The
``full`` variant wraps the attention in a transformer block (norms, residual,
MLP) for the head-size ablation.
"""

from __future__ import annotations

import copy
import logging
import math
import warnings
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_tensors, save_tensors
from .config import ExperimentConfig, ProbeConfig
from .datasets import LabeledSample, VideoStore
from .errors import InvalidArgumentError
from .metrics import ava_map, top1_accuracy
from .model import MLP, TokenSequence, VideoEncoder
from .pipeline import (VideoSnippet, centered_window, crop_resize, expand_bbox, normalize, sample_frames,
                       union_bboxes)

logger = logging.getLogger(__name__)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise InvalidArgumentError(f"dim={dim} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        B, N, C = x.shape
        hd = C // self.heads
        q = self.q(query).reshape(B, -1, self.heads, hd).transpose(1, 2)
        k, v = self.kv(x).reshape(B, N, 2, self.heads, hd).permute(2, 0, 3, 1, 4)
        attn = ((q @ k.transpose(-2, -1)) * hd ** -0.5).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, -1, C)
        return self.proj(out)


class AttentiveClassifier(nn.Module):
    def __init__(self, dim: int, n_classes: int, heads: int = 4, variant: str = "attention",
                 task: str = "single", mlp_ratio: float = 4.0):
        super().__init__()
        if n_classes < 2:
            raise InvalidArgumentError("need C > 1 classes")
        if variant not in ("attention", "full"):
            raise InvalidArgumentError(f"unknown head variant {variant!r}")
        if task not in ("single", "multi"):
            raise InvalidArgumentError(f"unknown task {task!r}")
        self.dim, self.n_classes, self.variant, self.task = dim, n_classes, variant, task
        self.query = nn.Parameter(torch.zeros(1, 1, dim))
        self.cross_attn = CrossAttention(dim, heads)
        if variant == "full":
            self.norm1 = nn.LayerNorm(dim)
            self.norm2 = nn.LayerNorm(dim)
            self.mlp = MLP(dim, int(dim * mlp_ratio))
        self.linear = nn.Linear(dim, n_classes)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.query, std=0.02)

    def pooled(self, h: torch.Tensor) -> torch.Tensor:
        q = self.query.expand(h.shape[0], -1, -1)
        if self.variant == "attention":
            return self.cross_attn(q, h)[:, 0]
        x = q + self.cross_attn(q, self.norm1(h))
        x = x + self.mlp(self.norm2(x))
        return x[:, 0]

    def forward(self, h) -> torch.Tensor:
        """Class logits ``(B, C)`` for tokens ``(B, N, d)``."""
        if isinstance(h, TokenSequence):
            h = h.tokens
        if h.dim() == 2:
            h = h.unsqueeze(0)
        if h.shape[-1] != self.dim:
            raise InvalidArgumentError(f"token dim {h.shape[-1]} != head dim {self.dim}")
        return self.linear(self.pooled(h.to(self.query.dtype)))

    def predict_proba(self, h) -> torch.Tensor:
        logits = self(h)
        return logits.softmax(-1) if self.task == "single" else logits.sigmoid()


def classify(h, head: AttentiveClassifier) -> torch.Tensor:
    """Class probabilities for one token sequence (or a batch of them)."""
    return head.predict_proba(h)


def loss_single(probs, y, eps: float = 1e-7, class_weights=None) -> torch.Tensor:
    """Cross-entropy ``-sum_c y_c log p_c``; batch-averaged for 2-D input."""
    probs, y = torch.as_tensor(probs), torch.as_tensor(y, dtype=torch.as_tensor(probs).dtype)
    terms = y * torch.log(probs.clamp(eps, 1.0))
    if class_weights is not None:
        terms = terms * torch.as_tensor(class_weights, dtype=terms.dtype)
    return -terms.sum(-1).mean()


def loss_multi(probs, y, eps: float = 1e-7, class_weights=None) -> torch.Tensor:
    """Binary cross-entropy summed over classes; batch-averaged for 2-D input."""
    probs, y = torch.as_tensor(probs), torch.as_tensor(y, dtype=torch.as_tensor(probs).dtype)
    p = probs.clamp(eps, 1.0 - eps)
    terms = y * torch.log(p) + (1 - y) * torch.log(1 - p)
    if class_weights is not None:
        terms = terms * torch.as_tensor(class_weights, dtype=terms.dtype)
    return -terms.sum(-1).mean()


@torch.no_grad()
def _encode(encoder: VideoEncoder, frames: np.ndarray, cfg: ExperimentConfig) -> TokenSequence:
    x = torch.from_numpy(normalize(frames, cfg.pipeline.pixel_mean, cfg.pipeline.pixel_std))
    encoder.eval()
    return encoder.encode(encoder.patchify(x))


def embed_snippet_task(sample: LabeledSample, store: VideoStore, encoder: VideoEncoder,
                       cfg: ExperimentConfig) -> TokenSequence:
    """Crop the clip to the union of its track boxes and encode every frame (no stride)."""
    if sample.task != "single":
        raise InvalidArgumentError(f"{sample.sample_id}: snippet-wise samples are single-label")
    if not sample.boxes:
        raise InvalidArgumentError(f"{sample.sample_id}: no boxes")
    if sample.n_frames != cfg.model.frames:
        raise InvalidArgumentError(
            f"{sample.sample_id}: snippet has {sample.n_frames} frames, encoder takes {cfg.model.frames}")
    f0, fps = sample.start_frame, store.fps(sample.source_id)
    frames = np.asarray(store.frames(sample.source_id)[f0:f0 + sample.n_frames])
    clip = crop_resize(VideoSnippet(frames, fps, sample.source_id, f0 / fps),
                       union_bboxes(sample.boxes), cfg.model.image_size)
    return _encode(encoder, clip.frames, cfg)


def embed_frame_task(sample: LabeledSample, store: VideoStore, encoder: VideoEncoder,
                     cfg: ExperimentConfig) -> TokenSequence:
    """Encode the window centered on the query time, cropped to the query box."""
    if sample.task != "multi" or sample.t is None:
        raise InvalidArgumentError(f"{sample.sample_id}: frame-wise samples need a time point")
    p = cfg.pipeline
    window = centered_window(store.video(sample.source_id), sample.t, p.window_seconds)
    box = sample.boxes[0]
    if p.expand_frame_task_boxes:
        box = expand_bbox(box, p.bbox_expand_factor)
    clip = crop_resize(window, box, cfg.model.image_size)
    # single deterministic view; the window normally equals the segment so no choice remains
    clip = sample_frames(clip, p.segment_frames, p.temporal_stride, np.random.default_rng(0))
    return _encode(encoder, clip.frames, cfg)


def embed_samples(samples, store: VideoStore, encoder: VideoEncoder,
                  cfg: ExperimentConfig) -> np.ndarray:
    """Stack of ``(n, N, d)`` float32 embeddings, one per sample."""
    out = []
    for s in samples:
        fn = embed_snippet_task if s.task == "single" else embed_frame_task
        out.append(fn(s, store, encoder, cfg).tokens[0].float().numpy())
    return np.stack(out)


def save_embedding_cache(path, sample_ids, embeddings: np.ndarray, metadata: Optional[dict] = None):
    return save_tensors(path, {sid: e for sid, e in zip(sample_ids, embeddings)}, metadata)


def load_embedding_cache(path) -> tuple:
    tensors, meta = load_tensors(path)
    return tensors, meta


def _val_metric(head: AttentiveClassifier, x: torch.Tensor, y: np.ndarray) -> float:
    with torch.no_grad():
        scores = head.predict_proba(x).double().numpy()
    if head.task == "single":
        return top1_accuracy({"sample_ids": list(range(len(y))), "scores": scores, "labels": y})
    return ava_map({"sample_ids": list(range(len(y))), "scores": scores, "labels": y}).mAP


def train_probe(train_x, train_y, val_x, val_y, cfg: ProbeConfig, task: str = "single",
                seed: int = 0) -> tuple:
    """Fit an attentive head on precomputed embeddings with early stopping.

    Trains for at most ``cfg.max_epochs`` epochs, evaluates validation Top-1
    (single-label) or mAP (multi-label) after each, and stops once
    ``cfg.patience`` epochs pass without improvement.  Returns
    ``(head, report)`` where ``head`` holds the best-on-validation weights.
    """
    train_x = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    val_x = torch.as_tensor(np.asarray(val_x), dtype=torch.float32)
    train_y, val_y = np.asarray(train_y), np.asarray(val_y)
    if len(train_x) == 0 or len(val_x) == 0:
        raise InvalidArgumentError("train and validation splits must be non-empty")
    if train_y.ndim != 2 or train_y.shape[0] != len(train_x):
        raise InvalidArgumentError("labels must be (n_samples, n_classes) 0/1 arrays")
    if task == "single" and len(np.unique(train_y.argmax(1))) < 2:
        warnings.warn("training set contains a single class", RuntimeWarning, stacklevel=2)

    n, C, d = len(train_x), train_y.shape[1], train_x.shape[-1]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        head = AttentiveClassifier(d, C, cfg.num_heads, cfg.head, task)
    other = [p for name, p in head.named_parameters() if name != "query"]
    opt = torch.optim.AdamW([{"params": other, "weight_decay": cfg.weight_decay},
                             {"params": [head.query], "weight_decay": 0.0}],
                            lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_epochs * steps_per_epoch
    loss_fn = loss_single if task == "single" else loss_multi
    y_t = torch.as_tensor(train_y, dtype=torch.float32)
    gen = torch.Generator().manual_seed(seed)

    best, best_epoch, best_state = -math.inf, -1, None
    history, k = [], 0
    for epoch in range(cfg.max_epochs):
        head.train()
        perm = torch.randperm(n, generator=gen)
        running = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            for group in opt.param_groups:
                group["lr"] = cfg.lr * 0.5 * (1 + math.cos(math.pi * k / total))
            probs = head.predict_proba(train_x[idx])
            loss = loss_fn(probs, y_t[idx], cfg.prob_eps, cfg.class_weights)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
            k += 1
        head.eval()
        metric = _val_metric(head, val_x, val_y)
        history.append({"epoch": epoch, "train_loss": running / n, "val_metric": metric})
        if metric > best:
            best, best_epoch, best_state = metric, epoch, copy.deepcopy(head.state_dict())
        elif epoch - best_epoch >= cfg.patience:
            break
    head.load_state_dict(best_state)
    head.eval()
    report = {"metric": "top1" if task == "single" else "mAP", "best_epoch": best_epoch,
              "best_val_metric": best, "epochs_run": len(history), "history": history,
              "variant": cfg.head, "param_count": sum(p.numel() for p in head.parameters())}
    return head, report
