"""scikit-learn style estimators over the functional core.

``JEPAPretrainer`` fits the masked latent objective on in-memory clips and
transforms clips into frozen target-encoder tokens; ``FrozenEncoderEmbedder``
does the transform half for an existing checkpoint (or a random encoder);
``AttentiveProbeClassifier`` trains the attentive head on token arrays.  They
compose with :class:`sklearn.pipeline.Pipeline`::

    make_pipeline(FrozenEncoderEmbedder(checkpoint=ck), AttentiveProbeClassifier())
"""

from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig, ProbeConfig, desk_preset
from .errors import InvalidArgumentError
from .model import VideoEncoder
from .pipeline import normalize
from .pretrain import Pretrainer


def check_clips(X, cfg: ExperimentConfig) -> np.ndarray:
    """Validate a stack of clips ``(n, frames, S, S, 3)``; uint8 input is normalized."""
    X = np.asarray(X)
    m = cfg.model
    expected = (m.frames, m.image_size, m.image_size, m.in_chans)
    if X.ndim != 5 or X.shape[1:] != expected:
        raise InvalidArgumentError(f"expected clips of shape (n, *{expected}), got {X.shape}")
    if X.shape[0] == 0:
        raise InvalidArgumentError("no clips given")
    if X.dtype == np.uint8:
        return normalize(X, cfg.pipeline.pixel_mean, cfg.pipeline.pixel_std)
    X = X.astype(np.float32)
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("clips contain non-finite values")
    return X


def check_tokens(X, dim: Optional[int] = None) -> np.ndarray:
    """Validate token arrays ``(n, N, d)``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3 or 0 in X.shape:
        raise InvalidArgumentError(f"expected token arrays of shape (n, N, d), got {X.shape}")
    if dim is not None and X.shape[-1] != dim:
        raise InvalidArgumentError(f"token dim {X.shape[-1]} != fitted dim {dim}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("token arrays contain non-finite values")
    return X


def _resolve(config) -> ExperimentConfig:
    if config is None:
        return desk_preset()
    if isinstance(config, dict):
        config = ExperimentConfig.from_dict(config)
    config.validate()
    return config


@torch.no_grad()
def _encode_clips(encoder: VideoEncoder, X: np.ndarray, batch_size: int) -> np.ndarray:
    encoder.eval()
    out = [encoder(torch.from_numpy(X[i:i + batch_size])).numpy()
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out)


class FrozenEncoderEmbedder(TransformerMixin, BaseEstimator):
    """Map clips to the tokens of a frozen encoder.

    ``checkpoint`` is a pretraining checkpoint directory (its target encoder is
    used); ``None`` gives a randomly initialized encoder seeded by ``random_state``.
    """

    def __init__(self, config=None, checkpoint=None, random_state: int = 0, batch_size: int = 32):
        self.config = config
        self.checkpoint = checkpoint
        self.random_state = random_state
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        cfg = _resolve(self.config)
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": self.random_state})
        trainer = Pretrainer(cfg)
        if self.checkpoint is not None:
            trainer.load(self.checkpoint, with_optimizer=False)
        self.config_ = cfg
        self.encoder_ = trainer.model.target_encoder
        self.n_tokens_ = cfg.model.num_tokens
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        return _encode_clips(self.encoder_, check_clips(X, self.config_), self.batch_size)


class JEPAPretrainer(TransformerMixin, BaseEstimator):
    """Masked latent pretraining on an in-memory stack of clips.

    Each step draws ``batch_size`` clips with a generator seeded by
    ``(random_state, step)``.  After fitting, ``transform`` returns target
    encoder tokens and ``loss_curve_`` holds the per-step losses.
    """

    def __init__(self, config=None, total_steps: Optional[int] = None,
                 batch_size: Optional[int] = None, random_state: int = 0):
        self.config = config
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        cfg = _resolve(self.config).to_dict()
        cfg["seed"] = self.random_state
        if self.total_steps is not None:
            cfg["schedule"]["total_steps"] = self.total_steps
            cfg["schedule"]["warmup_steps"] = None
        if self.batch_size is not None:
            cfg["schedule"]["batch_size"] = self.batch_size
        cfg = ExperimentConfig.from_dict(cfg)
        cfg.validate()
        clips = check_clips(X, cfg)
        trainer = Pretrainer(cfg)
        losses = []
        B = cfg.schedule.batch_size
        for step in range(cfg.schedule.total_steps):
            pick = np.random.default_rng([cfg.seed, step, 0]).integers(len(clips), size=B)
            losses.append(trainer.pretrain_step(torch.from_numpy(clips[pick]),
                                                np.random.default_rng([cfg.seed, step, 1]),
                                                batch_id=step))
        self.config_ = cfg
        self.trainer_ = trainer
        self.loss_curve_ = np.asarray(losses)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return _encode_clips(self.trainer_.model.target_encoder, check_clips(X, self.config_), 32)

    def save(self, path):
        check_is_fitted(self, "trainer_")
        return self.trainer_.save(path)


class AttentiveProbeClassifier(ClassifierMixin, BaseEstimator):
    """Attentive classifier fitted on frozen token arrays ``(n, N, d)``.

    ``y`` is a label vector (single-label) or a 0/1 indicator matrix (multi-label,
    needs ``task="multi"``).  Without explicit validation data a stratified
    ``validation_fraction`` of the training set drives early stopping.
    """

    def __init__(self, head: str = "attention", num_heads: int = 4, lr: float = 1e-3,
                 weight_decay: float = 0.01, max_epochs: int = 30, patience: int = 5,
                 batch_size: int = 16, task: str = "single", validation_fraction: float = 0.2,
                 random_state: int = 0):
        self.head = head
        self.num_heads = num_heads
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.task = task
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _targets(self, y) -> np.ndarray:
        y = np.asarray(y)
        if self.task == "multi":
            if y.ndim != 2 or not np.isin(y, (0, 1)).all():
                raise InvalidArgumentError("multi-label targets must be a 0/1 matrix")
            return y.astype(np.int64)
        if y.ndim != 1:
            raise InvalidArgumentError("single-label targets must be a vector")
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise InvalidArgumentError("validation labels contain unseen classes")
        return np.eye(len(self.classes_), dtype=np.int64)[idx]

    def fit(self, X, y, X_val=None, y_val=None):
        from .probe import train_probe

        X = check_tokens(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise InvalidArgumentError(f"{len(X)} samples but {len(y)} labels")
        if self.task == "multi":
            self.classes_ = np.arange(np.asarray(y).shape[1])
        else:
            self.classes_ = np.unique(y)
            if len(self.classes_) < 2:
                raise InvalidArgumentError("need at least two classes")
        Y = self._targets(y)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            val = np.zeros(len(X), bool)
            groups = Y.argmax(1) if self.task == "single" else np.zeros(len(X), int)
            for g in np.unique(groups):
                members = rng.permutation(np.flatnonzero(groups == g))
                val[members[:int(round(self.validation_fraction * len(members)))]] = True
            if not val.any() or val.all():
                raise InvalidArgumentError("validation split is empty; pass X_val/y_val")
            X, X_val, Y, Y_val = X[~val], X[val], Y[~val], Y[val]
        else:
            X_val, Y_val = check_tokens(X_val, X.shape[-1]), self._targets(y_val)
        cfg = ProbeConfig(head=self.head, num_heads=self.num_heads, lr=self.lr,
                          weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                          patience=self.patience, batch_size=self.batch_size)
        self.head_, self.report_ = train_probe(X, Y, X_val, Y_val, cfg, self.task, self.random_state)
        self.n_features_in_ = X.shape[-1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "head_")
        X = check_tokens(X, self.n_features_in_)
        with torch.no_grad():
            return self.head_.predict_proba(torch.from_numpy(X)).double().numpy()

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        if self.task == "multi":
            return (p >= 0.5).astype(np.int64)
        return self.classes_[p.argmax(1)]
