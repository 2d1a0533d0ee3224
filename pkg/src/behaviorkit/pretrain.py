"""Masked latent prediction: multi-block masks, the L1 latent loss, lr / weight-decay /
EMA schedules, the single training step and the domain-adaptive pretraining loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .checkpoint import load_training_checkpoint, save_training_checkpoint
from .config import ExperimentConfig, MaskConfig
from .errors import CheckpointError, InvalidArgumentError, NonFiniteLossError
from .model import JEPAModel, TokenSequence, ema_update

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskSpec:
    """Partition of ``range(N)`` into context (visible) and target (masked) tokens."""

    context_idx: np.ndarray
    target_idx: np.ndarray
    N: int

    def __post_init__(self):
        ctx, tgt = np.asarray(self.context_idx), np.asarray(self.target_idx)
        if ctx.size == 0 or tgt.size == 0:
            raise InvalidArgumentError("context and target sets must both be non-empty")
        if np.intersect1d(ctx, tgt).size:
            raise InvalidArgumentError("context and target overlap")
        if not np.array_equal(np.union1d(ctx, tgt), np.arange(self.N)):
            raise InvalidArgumentError("context and target do not cover all tokens")

    @property
    def ratio(self) -> float:
        return len(self.target_idx) / self.N


def make_mask(grid, mask_ratio: float, rng: np.random.Generator,
              block_spec: Optional[MaskConfig] = None) -> MaskSpec:
    """Multi-block mask: the union of rectangular spatial blocks, extruded through time.

    Block sets are rejection-sampled until the masked fraction lies within
    ``block_spec.tolerance`` of ``mask_ratio``.
    """
    spec = block_spec or MaskConfig(ratio=mask_ratio)
    T, H, W = (int(g) for g in grid)
    if not 0 < mask_ratio < 1:
        raise InvalidArgumentError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if min(T, H, W) <= 0 or spec.n_blocks <= 0:
        raise InvalidArgumentError(f"invalid grid {grid} or block count {spec.n_blocks}")

    per_block = mask_ratio / spec.n_blocks
    for _ in range(spec.max_tries):
        spatial = np.zeros((H, W), dtype=bool)
        for _ in range(spec.n_blocks):
            area = rng.uniform(per_block, min(1.0, 1.5 * per_block)) * H * W
            aspect = rng.uniform(*spec.block_aspect)
            bh = int(min(H, max(1, round(math.sqrt(area * aspect)))))
            bw = int(min(W, max(1, round(math.sqrt(area / aspect)))))
            top = int(rng.integers(0, H - bh + 1))
            left = int(rng.integers(0, W - bw + 1))
            spatial[top:top + bh, left:left + bw] = True
        frac = spatial.mean()
        if 0 < frac < 1 and abs(frac - mask_ratio) <= spec.tolerance:
            masked = np.broadcast_to(spatial.ravel(), (T, H * W)).ravel()
            return MaskSpec(np.flatnonzero(~masked), np.flatnonzero(masked), T * H * W)
    raise InvalidArgumentError(
        f"no {spec.n_blocks}-block mask within {spec.tolerance} of ratio {mask_ratio} "
        f"on grid {grid} after {spec.max_tries} tries")


def jepa_loss(pred, target) -> torch.Tensor:
    """Mean absolute error between predicted and target latents.

    The target side is detached; gradients flow only into ``pred``.
    """
    if isinstance(pred, TokenSequence):
        pred = pred.tokens
    if isinstance(target, TokenSequence):
        target = target.tokens
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target.detach()).abs().mean()


@dataclass
class ScheduleState:
    step: int
    total_steps: int
    warmup_steps: int
    base_lr: float
    initial_wd: float = 0.01
    final_wd: float = 0.1
    momentum: float = 0.998
    momentum_final: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.step <= self.total_steps:
            raise InvalidArgumentError(f"step {self.step} outside [0, {self.total_steps}]")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidArgumentError("need 0 <= warmup_steps < total_steps")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, step: int = 0) -> "ScheduleState":
        s = cfg.schedule
        return cls(step=step, total_steps=s.total_steps, warmup_steps=s.resolved_warmup,
                   base_lr=s.base_lr, initial_wd=s.initial_wd, final_wd=s.final_wd,
                   momentum=s.ema_momentum, momentum_final=s.ema_momentum_final)

    def advanced(self) -> "ScheduleState":
        return replace(self, step=min(self.step + 1, self.total_steps))


def lr_at(s: ScheduleState) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if s.step < s.warmup_steps:
        return s.base_lr * s.step / s.warmup_steps
    progress = (s.step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def wd_at(s: ScheduleState) -> float:
    """Weight decay rising linearly from ``initial_wd`` to ``final_wd``."""
    return s.initial_wd + (s.final_wd - s.initial_wd) * s.step / s.total_steps


def momentum_at(s: ScheduleState) -> float:
    if s.momentum_final is None:
        return s.momentum
    return s.momentum + (s.momentum_final - s.momentum) * s.step / s.total_steps


def build_optimizer(model: JEPAModel, cfg: ExperimentConfig) -> torch.optim.AdamW:
    # 1-d tensors (biases, norm gains, mask token) are exempt from weight decay
    decay, no_decay = [], []
    for _, p in model.trainable_parameters():
        (decay if p.ndim >= 2 and p.shape[:2] != (1, 1) else no_decay).append(p)
    s = cfg.schedule
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": s.initial_wd, "apply_wd": True},
         {"params": no_decay, "weight_decay": 0.0, "apply_wd": False}],
        lr=0.0, betas=tuple(s.betas), eps=s.eps)


class Pretrainer:
    """Owns the JEPA model, optimizer and schedule for one pretraining run."""

    def __init__(self, cfg: ExperimentConfig, dtype: torch.dtype = torch.float32):
        cfg.validate()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.model = JEPAModel(cfg.model).to(dtype)
        self.optimizer = build_optimizer(self.model, cfg)
        self.schedule = ScheduleState.from_config(cfg)

    @property
    def step(self) -> int:
        return self.schedule.step

    def pretrain_step(self, batch: torch.Tensor, rng: np.random.Generator,
                      batch_id=None) -> float:
        """One optimizer step on ``batch`` (normalized clips, ``(B, F, S, S, 3)``).

        Context encoder and predictor get an AdamW update with the scheduled lr and
        weight decay; afterwards the target encoder moves by EMA.  Returns the loss.
        """
        if self.schedule.step >= self.schedule.total_steps:
            raise InvalidArgumentError("schedule already finished")
        m = self.model
        mask = make_mask(m.cfg.grid, self.cfg.mask.ratio, rng, self.cfg.mask)

        m.context_encoder.train()
        tokens = m.context_encoder.patchify(batch)
        context = m.context_encoder.encode(tokens, keep=mask.context_idx)
        pred = m.predictor.predict(context, mask.target_idx)
        with torch.no_grad():
            full = m.target_encoder.encode(m.target_encoder.patchify(batch))
            target = full.tokens[:, torch.as_tensor(mask.target_idx)]
        loss = jepa_loss(pred, target)

        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} at step {self.schedule.step}",
                {"step": self.schedule.step, "batch_id": batch_id,
                 "schedule": asdict(self.schedule)})

        lr, wd = lr_at(self.schedule), wd_at(self.schedule)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
            group["weight_decay"] = wd if group["apply_wd"] else 0.0
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        ema_update(m.target_encoder, m.context_encoder, momentum_at(self.schedule))
        self.schedule = self.schedule.advanced()
        return float(loss.item())

    def save(self, path, extra: Optional[dict] = None):
        meta = {"config": self.cfg.to_dict(), "step": self.schedule.step,
                "schedule": asdict(self.schedule), "seed": self.cfg.seed, **(extra or {})}
        return save_training_checkpoint(path, self.model, self.optimizer, metadata=meta)

    def load(self, path, with_optimizer: bool = True) -> dict:
        meta = load_training_checkpoint(path, self.model,
                                        self.optimizer if with_optimizer else None)
        if with_optimizer:
            self.schedule = ScheduleState(**meta["schedule"])
        return meta


def pretrain_step(trainer: Pretrainer, batch: torch.Tensor, rng: np.random.Generator) -> float:
    return trainer.pretrain_step(batch, rng)


def checkpoint_dir(run_dir, step: int) -> Path:
    return Path(run_dir) / "checkpoints" / f"step_{step:07d}"


def latest_checkpoint(run_dir) -> Optional[Path]:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*"))
    ckpts = [c for c in ckpts if (c / "metadata.json").is_file()]
    return ckpts[-1] if ckpts else None


def _rewrite_curve(path: Path, upto_step: int) -> None:
    if not path.exists():
        return
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "wd"])
        for r in rows:
            if int(r["step"]) < upto_step:
                w.writerow([r["step"], r["loss"], r["lr"], r["wd"]])


def run_dap(cfg: ExperimentConfig, dataset, run_dir, *, init: Optional[Union[str, Path]] = None,
            resume: bool = False, max_steps: Optional[int] = None) -> Path:
    """Domain-adaptive pretraining loop.

    ``dataset`` must provide ``batch(step) -> tensor`` (see
    :class:`behaviorkit.datasets.PretrainClipStream`).  Writes
    ``checkpoints/step_*`` every ``schedule.checkpoint_every`` steps (and at step
    0 and the end) plus ``loss_curve.csv``.  ``init`` loads model weights from an
    external checkpoint before training; ``resume`` continues from the newest
    checkpoint in ``run_dir``.  ``max_steps`` stops early (for interruption tests).
    Returns the path of the last checkpoint written.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = Pretrainer(cfg)
    curve = run_dir / "loss_curve.csv"

    if resume:
        ckpt = latest_checkpoint(run_dir)
        if ckpt is None:
            raise CheckpointError(f"--resume given but no checkpoint found under {run_dir}/checkpoints")
        trainer.load(ckpt)
        logger.info("resumed from %s (step %d)", ckpt, trainer.step)
        _rewrite_curve(curve, trainer.step)
    else:
        if init is not None:
            load_training_checkpoint(init, trainer.model)
            logger.info("initialized weights from %s", init)
        _rewrite_curve(curve, 0)
        trainer.save(checkpoint_dir(run_dir, 0))

    if not curve.exists():
        with open(curve, "w", newline="") as fh:
            csv.writer(fh).writerow(["step", "loss", "lr", "wd"])

    total = cfg.schedule.total_steps
    stop = total if max_steps is None else min(total, max_steps)
    last = latest_checkpoint(run_dir)
    t0 = time.time()
    with open(curve, "a", newline="") as fh:
        writer = csv.writer(fh)
        while trainer.step < stop:
            step = trainer.step
            batch = dataset.batch(step)
            lr, wd = lr_at(trainer.schedule), wd_at(trainer.schedule)
            loss = trainer.pretrain_step(batch, np.random.default_rng([cfg.seed, step, 1]),
                                         batch_id=step)
            writer.writerow([step, repr(loss), repr(lr), repr(wd)])
            if trainer.step % cfg.schedule.checkpoint_every == 0 or trainer.step == total:
                fh.flush()
                last = trainer.save(checkpoint_dir(run_dir, trainer.step))
            if step % 50 == 0:
                logger.info("step %d/%d loss %.4f lr %.2e wd %.3f (%.1fs)", step, total, loss,
                            lr, wd, time.time() - t0)
    if trainer.step == stop and (last is None or last.name != checkpoint_dir(run_dir, stop).name):
        last = trainer.save(checkpoint_dir(run_dir, trainer.step))
    return last
