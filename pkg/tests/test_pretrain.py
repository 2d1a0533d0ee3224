import copy
import csv
import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from behaviorkit.config import ExperimentConfig, MaskConfig, ScheduleConfig, desk_preset, reference_preset
from behaviorkit.errors import CheckpointError, InvalidArgumentError, NonFiniteLossError
from behaviorkit.pretrain import (MaskSpec, Pretrainer, ScheduleState, jepa_loss, latest_checkpoint,
                                  lr_at, make_mask, momentum_at, run_dap, wd_at)


class RandomClips:
    """Deterministic stand-in for the clip stream: batch depends on step only."""

    def __init__(self, cfg):
        self.cfg = cfg

    def batch(self, step):
        g = torch.Generator().manual_seed(1000 + step)
        m = self.cfg.model
        return torch.randn(self.cfg.schedule.batch_size, m.frames, m.image_size, m.image_size, 3,
                           generator=g)


def small_cfg(**schedule):
    cfg = desk_preset()
    cfg.schedule = ScheduleConfig(**{"total_steps": 6, "batch_size": 2, "checkpoint_every": 3,
                                     **schedule})
    return cfg


# -- masks -------------------------------------------------------------------------

def _rectangles(n):
    for h, w in itertools.product(range(1, n + 1), repeat=2):
        for top, left in itertools.product(range(n - h + 1), range(n - w + 1)):
            m = np.zeros((n, n), bool)
            m[top:top + h, left:left + w] = True
            yield m


def _two_block_unions(n):
    rects = [r.tobytes() for r in _rectangles(n)]
    arrs = [np.frombuffer(r, bool).reshape(n, n) for r in rects]
    return {(a | b).tobytes() for a in arrs for b in arrs}


def test_mask_tiny_grid_matches_enumeration():
    unions = _two_block_unions(4)
    achievable = {np.frombuffer(u, bool).sum() for u in unions}
    # only 8 of 16 cells lies within 0.05 of ratio 0.5
    in_tol = sorted(k for k in achievable if abs(k / 16 - 0.5) <= 0.05)
    assert in_tol == [8]
    rng = np.random.default_rng(0)
    for _ in range(300):
        m = make_mask((4, 4, 4), 0.5, rng)
        assert 28 <= len(m.target_idx) <= 36 and len(m.target_idx) == 4 * 8
        spatial = np.zeros(64, bool)
        spatial[m.target_idx] = True
        spatial = spatial.reshape(4, 16)
        assert (spatial == spatial[0]).all()  # extruded through time
        assert spatial[0].reshape(4, 4).tobytes() in unions


@given(st.integers(0, 2**32 - 1), st.sampled_from([(4, 4, 4), (8, 14, 14), (2, 6, 9)]),
       st.floats(0.3, 0.7))
@settings(max_examples=60, deadline=None)
def test_mask_partition_law(seed, grid, ratio):
    m = make_mask(grid, ratio, np.random.default_rng(seed), MaskConfig(ratio=ratio, tolerance=0.1))
    n = int(np.prod(grid))
    both = np.concatenate([m.context_idx, m.target_idx])
    assert np.array_equal(np.sort(both), np.arange(n))
    assert abs(m.ratio - ratio) <= 0.1 + 1e-12


def test_mask_deterministic():
    a = make_mask((8, 14, 14), 0.5, np.random.default_rng(5))
    b = make_mask((8, 14, 14), 0.5, np.random.default_rng(5))
    assert np.array_equal(a.target_idx, b.target_idx)


def test_mask_errors():
    with pytest.raises(InvalidArgumentError):
        make_mask((1, 1, 1), 0.5, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        make_mask((4, 4, 4), 1.0, np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        MaskSpec(np.arange(3), np.arange(2, 5), 5)
    with pytest.raises(InvalidArgumentError):
        MaskSpec(np.arange(3), np.arange(3, 4), 5)


# -- loss --------------------------------------------------------------------------

def test_jepa_loss_examples():
    t = torch.randn(2, 5, 4, dtype=torch.float64)
    assert jepa_loss(t, t).item() == 0.0
    assert jepa_loss(t + 1, t).item() == pytest.approx(1.0, abs=1e-12)
    pred = torch.tensor([[1.0, -2.0], [0.5, 3.0], [0.0, 0.25]], dtype=torch.float64)
    tgt = torch.tensor([[0.5, 1.0], [0.5, -1.0], [2.0, 0.0]], dtype=torch.float64)
    # |0.5| + |3| + 0 + |4| + |2| + |0.25| = 9.75 over 6 entries
    assert jepa_loss(pred, tgt).item() == pytest.approx(9.75 / 6, abs=1e-12)


@given(st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_jepa_loss_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 6, 3))
    p, t = rng.normal(size=shape), rng.normal(size=shape)
    brute = sum(abs(a - b) for a, b in zip(p.ravel(), t.ravel())) / p.size
    got = jepa_loss(torch.from_numpy(p), torch.from_numpy(t)).item()
    assert abs(got - brute) <= 1e-12
    perm = rng.permutation(shape[1])
    assert jepa_loss(torch.from_numpy(p[:, perm]), torch.from_numpy(t[:, perm])).item() == pytest.approx(got, abs=1e-12)
    assert got > 0


def test_jepa_loss_gradient_only_to_pred():
    p = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    t = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    jepa_loss(p, t).backward()
    assert t.grad is None
    torch.testing.assert_close(p.grad, torch.sign(p - t).detach() / 12)
    with pytest.raises(InvalidArgumentError):
        jepa_loss(torch.zeros(2, 3), torch.zeros(3, 2))


# -- schedules ---------------------------------------------------------------------

def test_reference_schedule_endpoints():
    cfg = reference_preset()
    s = cfg.schedule
    state = lambda k: ScheduleState.from_config(cfg, k)
    assert lr_at(state(0)) == 0.0
    assert lr_at(state(s.resolved_warmup)) == 6e-6
    assert lr_at(state(s.total_steps)) == 0.0
    assert wd_at(state(0)) == 0.01 and wd_at(state(s.total_steps)) == 0.1
    assert s.total_steps * s.batch_size == 1_152_000


def test_schedule_midpoints():
    st_ = ScheduleState(step=0, total_steps=1000, warmup_steps=100, base_lr=6e-6)
    mid = (100 + 1000) // 2
    assert lr_at(ScheduleState(**{**st_.__dict__, "step": mid})) == pytest.approx(3e-6, rel=1e-12)
    assert wd_at(ScheduleState(**{**st_.__dict__, "step": 500})) == pytest.approx(0.055, abs=1e-15)
    assert lr_at(ScheduleState(**{**st_.__dict__, "step": 50})) == pytest.approx(3e-6, rel=1e-12)


def test_schedule_continuity_and_monotone_wd():
    base = dict(total_steps=1000, warmup_steps=100, base_lr=1.0)
    lrs = [lr_at(ScheduleState(step=k, **base)) for k in range(1001)]
    wds = [wd_at(ScheduleState(step=k, **base)) for k in range(1001)]
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= 1 / 100 + 1e-12
    assert all(b >= a for a, b in zip(wds, wds[1:]))


def test_momentum_ramp():
    s = ScheduleState(step=50, total_steps=100, warmup_steps=10, base_lr=1.0, momentum=0.99,
                      momentum_final=1.0)
    assert momentum_at(s) == pytest.approx(0.995)
    assert momentum_at(ScheduleState(step=50, total_steps=100, warmup_steps=10, base_lr=1.0)) == 0.998


def test_schedule_state_validation():
    with pytest.raises(InvalidArgumentError):
        ScheduleState(step=11, total_steps=10, warmup_steps=1, base_lr=1.0)
    with pytest.raises(InvalidArgumentError):
        ScheduleState(step=0, total_steps=10, warmup_steps=10, base_lr=1.0)


# -- training step -------------------------------------------------------------------

def test_pretrain_step_exact_ema_and_no_target_grad():
    cfg = small_cfg()
    tr = Pretrainer(cfg, dtype=torch.float64)
    batch = RandomClips(cfg).batch(0).double()
    for step in range(3):
        old_target = copy.deepcopy(tr.model.target_encoder.state_dict())
        tr.pretrain_step(batch, np.random.default_rng(step))
        m = cfg.schedule.ema_momentum
        online = tr.model.context_encoder.state_dict()
        for name, p in tr.model.target_encoder.named_parameters():
            expected = m * old_target[name] + (1 - m) * online[name]
            assert torch.allclose(p, expected, rtol=0, atol=1e-12)
            assert p.grad is None and not p.requires_grad
    for group in tr.optimizer.param_groups:
        for p in group["params"]:
            assert all(p is not q for q in tr.model.target_encoder.parameters())


def test_pretrain_step_deterministic():
    cfg = small_cfg()
    batch = RandomClips(cfg).batch(0)
    states = []
    for _ in range(2):
        tr = Pretrainer(cfg)
        losses = [tr.pretrain_step(batch, np.random.default_rng([0, k, 1])) for k in range(2)]
        states.append((losses, tr.model.state_dict()))
    assert states[0][0] == states[1][0]
    assert all(torch.equal(v, states[1][1][k]) for k, v in states[0][1].items())


def test_pretrain_step_updates_context_and_decays():
    cfg = small_cfg(warmup_steps=0, base_lr=1e-2)
    tr = Pretrainer(cfg)
    before = copy.deepcopy(tr.model.context_encoder.state_dict())
    tr.pretrain_step(RandomClips(cfg).batch(0), np.random.default_rng(0))
    after = tr.model.context_encoder.state_dict()
    assert not torch.equal(before["blocks.0.attn.qkv.weight"], after["blocks.0.attn.qkv.weight"])
    groups = {g["apply_wd"]: g for g in tr.optimizer.param_groups}
    assert groups[True]["weight_decay"] == pytest.approx(0.01) and groups[False]["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in groups[True]["params"])
    assert tr.step == 1


def test_non_finite_loss_reports_diagnostics():
    cfg = small_cfg()
    tr = Pretrainer(cfg)
    batch = RandomClips(cfg).batch(0)
    batch[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        tr.pretrain_step(batch, np.random.default_rng(0), batch_id=17)
    assert info.value.diagnostics["step"] == 0 and info.value.diagnostics["batch_id"] == 17
    assert info.value.exit_code == 4


def test_step_past_end_rejected():
    cfg = small_cfg(total_steps=1, warmup_steps=0)
    tr = Pretrainer(cfg)
    tr.pretrain_step(RandomClips(cfg).batch(0), np.random.default_rng(0))
    with pytest.raises(InvalidArgumentError):
        tr.pretrain_step(RandomClips(cfg).batch(1), np.random.default_rng(1))


# -- loop and resume ----------------------------------------------------------------

def _read_curve(run):
    with open(run / "loss_curve.csv") as fh:
        return list(csv.DictReader(fh))


def test_run_dap_resume_is_bit_exact(tmp_path):
    cfg = small_cfg()
    data = RandomClips(cfg)
    full = run_dap(cfg, data, tmp_path / "full")
    assert sorted(p.name for p in (tmp_path / "full" / "checkpoints").iterdir()) == \
        ["step_0000000", "step_0000003", "step_0000006"]

    part = tmp_path / "part"
    run_dap(cfg, data, part, max_steps=5)  # interrupted after the step-3 checkpoint
    assert latest_checkpoint(part).name == "step_0000005"
    import shutil
    shutil.rmtree(part / "checkpoints" / "step_0000005")
    resumed = run_dap(cfg, data, part, resume=True)

    a, b = Pretrainer(cfg), Pretrainer(cfg)
    a.load(full)
    b.load(resumed)
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k
    for sa, sb in zip(a.optimizer.state.values(), b.optimizer.state.values()):
        assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert _read_curve(tmp_path / "full") == _read_curve(part)
    assert [int(r["step"]) for r in _read_curve(part)] == list(range(6))


def test_run_dap_resume_without_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        run_dap(small_cfg(), RandomClips(small_cfg()), tmp_path, resume=True)


def test_run_dap_init_from_checkpoint(tmp_path):
    cfg = small_cfg(total_steps=2, checkpoint_every=2)
    src = run_dap(cfg, RandomClips(cfg), tmp_path / "a")
    other = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": 9})
    start = run_dap(other, RandomClips(other), tmp_path / "b", init=src, max_steps=0)
    a, b = Pretrainer(cfg), Pretrainer(other)
    a.load(src, with_optimizer=False)
    b.load(start, with_optimizer=False)
    assert all(torch.equal(v, b.model.state_dict()[k]) for k, v in a.model.state_dict().items())
    assert b.step == 0 or math.isfinite(b.step)
