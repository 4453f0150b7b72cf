"""Training loops for both stages, with AdamW, warmup, EMA and checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import rng as rngmod
from .config import RunConfig, TrainConfig
from .diffusion import DenoiserMLP, make_schedule
from .errors import ConfigError, NumericError
from .optim import EMA, AdamW, scaled_lr, warmup_lr
from .stage1 import Stage1Model, loss_stage1
from .stage2 import Stage2Model, loss_stage2, sample_from_probs, teacher_forced_probs
from .tokenizer import SyntheticWorld, build_world, generate_dataset

log = logging.getLogger("d2c.train")


def world_from(cfg: RunConfig) -> SyntheticWorld:
    w = cfg.world
    return build_world(w.seed, w.C, w.K, w.h, w.w, w.d, w.rho, w.sigma)


@lru_cache(maxsize=8)
def _dataset_cached(world_key: tuple, count: int, seed: int, start: int):
    world = build_world(*world_key)
    return generate_dataset(world, count, seed, start)


def dataset_for(cfg: RunConfig, count: int, start: int = 0):
    w = cfg.world
    key = (w.seed, w.C, w.K, w.h, w.w, w.d, w.rho, w.sigma)
    return _dataset_cached(key, count, cfg.data_seed, start)


@dataclass
class TrainState:
    step: int = 0
    history: list[dict] = field(default_factory=list)


def _schedule(tc: TrainConfig) -> tuple[int, int, int, float]:
    per_epoch = tc.dataset_size // tc.batch_size
    total = tc.epochs * per_epoch
    if tc.max_steps is not None:
        total = min(total, tc.max_steps)
    warmup = int(round(tc.warmup_fraction * tc.epochs * per_epoch))
    return per_epoch, total, warmup, scaled_lr(tc.base_lr, tc.batch_size, tc.reference_batch)


def _batch_indices(seed: int, tag: str, step: int, per_epoch: int, tc: TrainConfig) -> np.ndarray:
    epoch, k = divmod(step, per_epoch)
    perm = rngmod.stream(seed, tag, epoch).permutation(tc.dataset_size)
    return perm[k * tc.batch_size:(k + 1) * tc.batch_size]


def _check_loss(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise NumericError(f"{stage} loss became {value} at step {step}; lower the learning rate or check the data")


def _run_loop(tc: TrainConfig, params: dict, loss_fn, seed: int, tag: str, state: TrainState,
              opt: AdamW, ema: EMA, on_step=None, stop_at: int | None = None) -> TrainState:
    per_epoch, total, warmup, peak = _schedule(tc)
    end = total if stop_at is None else min(total, stop_at)
    running, count = 0.0, 0
    while state.step < end:
        step = state.step
        idx = _batch_indices(seed, f"{tag}-epoch", step, per_epoch, tc)
        g = rngmod.stream(seed, f"{tag}-step", step)
        opt.lr = warmup_lr(peak, step, warmup)
        loss = loss_fn(idx, g)
        value = loss.item()
        _check_loss(value, tag, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema.update(params)
        running += value
        count += 1
        state.step += 1
        if on_step is not None:
            on_step(step, value)
        if state.step % per_epoch == 0 or state.step == end:
            state.history.append({"step": state.step, "epoch": state.step / per_epoch, "loss": running / count,
                                  "lr": opt.lr})
            log.info("%s step %d epoch %.2f loss %.5f lr %.3g", tag, state.step, state.step / per_epoch,
                     running / count, opt.lr)
            running, count = 0.0, 0
    return state


# ----------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Run:
    model: Stage1Model
    ema: EMA
    opt: AdamW
    state: TrainState
    config: RunConfig


def new_stage1(cfg: RunConfig) -> Stage1Run:
    model = Stage1Model(cfg.stage1, seed=cfg.seed)
    params = model.params.trainable()
    tc = cfg.train1
    opt = AdamW(params, lr=0.0, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
    return Stage1Run(model, EMA(params, tc.ema_momentum), opt, TrainState(), cfg)


def train_stage1(cfg: RunConfig, run: Stage1Run | None = None, stop_at: int | None = None,
                 on_step=None) -> Stage1Run:
    cfg.train1.validate()
    run = run or new_stage1(cfg)
    classes, tokens, _ = dataset_for(cfg, cfg.train1.dataset_size)
    params = run.model.params.trainable()

    def loss_fn(idx, g):
        return loss_stage1(run.model, classes[idx], tokens[idx], g)

    _run_loop(cfg.train1, params, loss_fn, cfg.seed, "stage1", run.state, run.opt, run.ema, on_step, stop_at)
    return run


def stage1_eval_ce(model: Stage1Model, classes, tokens, chunk: int = 256) -> float:
    """Mean next-token cross-entropy without class dropout."""
    total, n = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(classes), chunk):
            c, t = classes[s:s + chunk], tokens[s:s + chunk]
            logits = model.forward_logits(c, t[:, :-1])
            total += ad.cross_entropy(logits, t).item() * len(c)
            n += len(c)
    return total / n


# ----------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Run:
    stage2: Stage2Model
    denoiser: DenoiserMLP
    ema: EMA
    opt: AdamW
    state: TrainState
    config: RunConfig

    @property
    def params(self) -> dict:
        return joint_params(self.stage2, self.denoiser)


def joint_params(stage2: Stage2Model, denoiser: DenoiserMLP) -> dict:
    out = {f"stage2/{k}": v for k, v in stage2.params.trainable().items()}
    out.update({f"denoiser/{k}": v for k, v in denoiser.params.trainable().items()})
    return out


def new_stage2(cfg: RunConfig, stage1: Stage1Model | None) -> Stage2Run:
    table = None
    if cfg.stage2.fusion != "none":
        if stage1 is None:
            raise ConfigError("fusion needs the first-stage embedding table")
        table = stage1.params["tok_emb"].data
    s2 = Stage2Model(cfg.stage2, seed=cfg.seed, discrete_table=table)
    den = DenoiserMLP(cfg.diffusion, seed=cfg.seed)
    params = joint_params(s2, den)
    tc = cfg.train2
    opt = AdamW(params, lr=0.0, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
    return Stage2Run(s2, den, EMA(params, tc.ema_momentum), opt, TrainState(), cfg)


_TEACHER: dict = {}


def teacher_probs_for(cfg: RunConfig, stage1: Stage1Model, classes, tokens) -> np.ndarray:
    key = (id(stage1), cfg.data_seed, len(classes), cfg.world.seed)
    fingerprint = float(stage1.params["head"].data.sum())
    hit = _TEACHER.get(key)
    if hit is not None and hit[0] == fingerprint:
        return hit[1]
    probs = teacher_forced_probs(stage1, classes, tokens).astype(np.float32)
    _TEACHER.clear()
    _TEACHER[key] = (fingerprint, probs)
    return probs


def train_stage2(cfg: RunConfig, stage1: Stage1Model | None, run: Stage2Run | None = None,
                 stop_at: int | None = None, on_step=None) -> Stage2Run:
    """Train the masked generator and diffusion head with the first stage frozen."""
    cfg.train2.validate()
    if stage1 is not None:
        stage1.params.freeze()
    run = run or new_stage2(cfg, stage1)
    if run.stage2.config.fusion != cfg.stage2.fusion:
        raise ConfigError(
            f"fusion kind mismatch: checkpoint has {run.stage2.config.fusion!r}, config asks {cfg.stage2.fusion!r}"
        )
    classes, tokens, latents = dataset_for(cfg, cfg.train2.dataset_size)
    teacher = cfg.stage2.fusion != "none" and cfg.stage2.condition_source == "teacher"
    probs = teacher_probs_for(cfg, stage1, classes, tokens) if teacher else None
    schedule = make_schedule(cfg.diffusion.T, cfg.diffusion.schedule)
    params = run.params

    def loss_fn(idx, g):
        if cfg.stage2.fusion == "none":
            cond_tokens = None
        elif teacher:
            cond_tokens = sample_from_probs(probs[idx].astype(np.float64), g)
        else:
            cond_tokens = tokens[idx]
        return loss_stage2(run.stage2, run.denoiser, schedule, classes[idx], latents[idx], cond_tokens, g,
                           batch_mul=cfg.diffusion.batch_mul)

    _run_loop(cfg.train2, params, loss_fn, cfg.seed, "stage2", run.state, run.opt, run.ema, on_step, stop_at)
    return run


# ----------------------------------------------------------------------------
# checkpoints


def save_stage1(path, run: Stage1Run) -> None:
    tensors = {f"stage1/{k}": v.data for k, v in run.model.params.items()}
    tensors.update({f"ema/stage1/{k}": v for k, v in run.ema.shadow.items()})
    tensors.update({f"opt/{k}": v for k, v in run.opt.state().items()})
    tensors["meta/step"] = np.array([run.state.step], dtype=np.float64)
    ckpt.save(path, {"kind": "stage1", "run": run.config.to_dict(), "history": run.state.history}, tensors)


def save_stage2(path, run: Stage2Run) -> None:
    tensors = {f"stage2/{k}": v.data for k, v in run.stage2.params.items()}
    tensors.update({f"denoiser/{k}": v.data for k, v in run.denoiser.params.items()})
    tensors.update({f"ema/{k}": v for k, v in run.ema.shadow.items()})
    tensors.update({f"opt/{k}": v for k, v in run.opt.state().items()})
    tensors["meta/step"] = np.array([run.state.step], dtype=np.float64)
    ckpt.save(path, {"kind": "stage2", "run": run.config.to_dict(), "history": run.state.history}, tensors)


def _section(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_stage1(path, use_ema: bool = False) -> Stage1Run:
    meta, tensors = ckpt.load(path)
    if meta.get("kind") != "stage1":
        raise ConfigError(f"{path} is not a first-stage checkpoint")
    cfg = RunConfig.from_dict(meta["run"])
    run = new_stage1(cfg)
    run.model.params.load_state(_section(tensors, "stage1/"))
    run.ema.shadow = _section(tensors, "ema/stage1/")
    run.opt.load_state(_section(tensors, "opt/"))
    run.state = TrainState(int(tensors["meta/step"][0]), list(meta.get("history", [])))
    if use_ema:
        _apply_shadow(run.model.params.tensors, run.ema.shadow)
    return run


def load_stage2(path, stage1: Stage1Model | None = None, use_ema: bool = False,
                expect_fusion: str | None = None) -> Stage2Run:
    meta, tensors = ckpt.load(path)
    if meta.get("kind") != "stage2":
        raise ConfigError(f"{path} is not a second-stage checkpoint")
    cfg = RunConfig.from_dict(meta["run"])
    if expect_fusion is not None and cfg.stage2.fusion != expect_fusion:
        raise ConfigError(f"checkpoint fusion {cfg.stage2.fusion!r} != requested {expect_fusion!r}")
    s2 = Stage2Model(cfg.stage2, seed=cfg.seed)
    den = DenoiserMLP(cfg.diffusion, seed=cfg.seed)
    s2.params.load_state(_section(tensors, "stage2/"))
    den.params.load_state(_section(tensors, "denoiser/"))
    params = joint_params(s2, den)
    tc = cfg.train2
    opt = AdamW(params, lr=0.0, betas=(tc.beta1, tc.beta2), weight_decay=tc.weight_decay)
    opt.load_state(_section(tensors, "opt/"))
    ema = EMA(params, tc.ema_momentum)
    ema.shadow = {k: tensors[f"ema/{k}"] for k in params}
    run = Stage2Run(s2, den, ema, opt, TrainState(int(tensors["meta/step"][0]), list(meta.get("history", []))), cfg)
    if use_ema:
        _apply_shadow(params, ema.shadow)
    return run


def _apply_shadow(params: dict, shadow: dict) -> None:
    for k, p in params.items():
        if k in shadow:
            p.data = shadow[k].copy()
