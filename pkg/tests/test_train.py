import dataclasses
import math

import numpy as np
import pytest

from d2c import autodiff as ad
from d2c import train as TR
from d2c.autodiff import Tensor
from d2c.diffusion import make_schedule
from d2c.errors import ConfigError, NumericError
from d2c.optim import EMA, AdamW, scaled_lr, warmup_lr
from d2c.stage2 import loss_stage2

from conftest import tiny_config


def test_scaled_lr_reference_batch():
    assert scaled_lr(5e-5, 256) == 5e-5
    assert scaled_lr(5e-5, 64) == 1.25e-5
    assert scaled_lr(5e-5, 1024) == 2e-4


def test_warmup_ramp():
    assert [warmup_lr(1.0, s, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert warmup_lr(2.0, 0, 0) == 2.0


def test_ema_geometric_convergence():
    p = {"w": Tensor(np.full(3, 5.0), requires_grad=True)}
    ema = EMA(p, momentum=0.9)
    ema.shadow["w"][:] = 1.0
    for k in range(1, 30):
        ema.update(p)
        assert np.allclose(5.0 - ema.shadow["w"], 4.0 * 0.9**k, rtol=1e-12)


def test_adamw_first_step_is_sign_times_lr():
    # with bias correction the first update is lr * g / (|g| + eps)
    p = {"w": Tensor(np.array([[1.0, -2.0]]), requires_grad=True)}
    opt = AdamW(p, lr=0.1, weight_decay=0.0)
    p["w"].grad = np.array([[3.0, -0.5]])
    opt.step()
    assert np.allclose(p["w"].data, [[0.9, -1.9]], atol=1e-7)


def test_adamw_decay_skips_vectors():
    p = {"m": Tensor(np.ones((2, 2)), requires_grad=True), "v": Tensor(np.ones(2), requires_grad=True)}
    opt = AdamW(p, lr=0.5, weight_decay=0.1)
    for t in p.values():
        t.grad = np.zeros_like(t.data)
    opt.step()
    assert np.allclose(p["m"].data, 0.95) and np.array_equal(p["v"].data, np.ones(2))


def test_stage1_training_is_deterministic():
    a = TR.train_stage1(tiny_config())
    b = TR.train_stage1(tiny_config())
    assert a.state.history == b.state.history
    for k, v in a.model.params.items():
        assert np.array_equal(v.data, b.model.params[k].data)


@pytest.mark.parametrize("stage", [1, 2])
def test_resume_is_bit_exact(tmp_path, stage):
    cfg = tiny_config()
    s1 = TR.train_stage1(cfg).model
    full_losses, part_losses = [], []

    def rec(into):
        return lambda step, value: into.append(value)

    if stage == 1:
        full = TR.train_stage1(cfg, on_step=rec(full_losses))
        part = TR.train_stage1(cfg, stop_at=3, on_step=rec(part_losses))
        TR.save_stage1(tmp_path / "a.ckpt", part)
        resumed = TR.train_stage1(cfg, TR.load_stage1(tmp_path / "a.ckpt"), on_step=rec(part_losses))
        pairs = [(full.model.params.tensors, resumed.model.params.tensors)]
    else:
        full = TR.train_stage2(cfg, s1, on_step=rec(full_losses))
        part = TR.train_stage2(cfg, s1, stop_at=3, on_step=rec(part_losses))
        TR.save_stage2(tmp_path / "b.ckpt", part)
        resumed = TR.train_stage2(cfg, s1, TR.load_stage2(tmp_path / "b.ckpt"), on_step=rec(part_losses))
        pairs = [(full.params, resumed.params)]
    assert full_losses == part_losses
    for a, b in pairs:
        for k in a:
            assert np.array_equal(a[k].data, b[k].data), k
    assert all(np.array_equal(full.ema.shadow[k], resumed.ema.shadow[k]) for k in full.ema.shadow)


def test_stage1_frozen_during_stage2():
    cfg = tiny_config()
    s1 = TR.train_stage1(cfg).model
    before = {k: v.data.copy() for k, v in s1.params.items()}
    TR.train_stage2(cfg, s1)
    for k, v in s1.params.items():
        assert np.array_equal(v.data, before[k]), k
        assert not v.requires_grad


def test_fusion_mismatch_on_resume(tmp_path):
    cfg = tiny_config("cross_attention")
    s1 = TR.train_stage1(cfg).model
    TR.save_stage2(tmp_path / "c.ckpt", TR.train_stage2(cfg, s1, stop_at=1))
    other = tiny_config("q_former")
    with pytest.raises(ConfigError):
        TR.train_stage2(other, s1, TR.load_stage2(tmp_path / "c.ckpt"))
    with pytest.raises(ConfigError):
        TR.load_stage2(tmp_path / "c.ckpt", expect_fusion="q_former")


def test_fusion_needs_stage1():
    with pytest.raises(ConfigError):
        TR.new_stage2(tiny_config("q_former"), None)
    TR.new_stage2(tiny_config("none"), None)


def test_nan_loss_raises():
    cfg = tiny_config()
    run = TR.new_stage1(cfg)
    run.model.params["head"].data[:] = np.nan
    with pytest.raises(NumericError):
        TR.train_stage1(cfg, run)


def test_stage2_loss_drops_from_random_init():
    cfg = tiny_config("none")
    cfg.train2 = dataclasses.replace(cfg.train2, epochs=40, dataset_size=64, base_lr=2e-2)
    run = TR.new_stage2(cfg, None)
    classes, _, latents = TR.dataset_for(cfg, 64)
    sch = make_schedule(cfg.diffusion.T)
    g = np.random.default_rng(0)
    with ad.no_grad():
        init = np.mean([loss_stage2(run.stage2, run.denoiser, sch, classes, latents, None, g).item()
                        for _ in range(20)])
    # output layer starts near zero, so the initial loss is close to E|eps|^2 = d
    assert abs(init - cfg.world.d) < 0.2 * cfg.world.d
    TR.train_stage2(cfg, None, run)
    assert run.state.history[-1]["loss"] <= 0.7 * init


def test_history_has_one_row_per_epoch():
    run = TR.train_stage1(tiny_config())
    assert [h["epoch"] for h in run.state.history] == [1.0, 2.0]
    assert all(math.isfinite(h["loss"]) for h in run.state.history)


def test_ground_truth_condition_changes_loss():
    cfg = tiny_config("cross_attention")
    s1 = TR.train_stage1(cfg).model
    teacher = TR.train_stage2(cfg, s1, stop_at=3)
    cfg_gt = tiny_config("cross_attention")
    cfg_gt.stage2.condition_source = "ground_truth"
    truth = TR.train_stage2(cfg_gt, s1, stop_at=3)
    assert teacher.state.history[-1]["loss"] != truth.state.history[-1]["loss"]
    with pytest.raises(ConfigError):
        dataclasses.replace(cfg.stage2, condition_source="oracle")
