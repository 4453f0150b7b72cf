"""Two-stage generation: discrete grid first, then masked continuous unmasking."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .diffusion import NoiseSchedule, draw_sampling_noise, sample_token
from .errors import ConfigError
from .stage1 import sample_discrete
from .stage2 import MaskPlan, gather_cells


@dataclass
class GenerationConfig:
    steps: int = 64
    cfg: float = 1.0
    stage1_cfg: float = 1.0
    temperature: float = 1.0
    linear_guidance: bool = True
    diffusion_steps: int | None = None
    clip_x0: float | None = None
    seed: int = 0
    samples_per_class: int = 500

    def validate(self, n: int) -> None:
        if not 1 <= self.steps <= n:
            raise ConfigError(f"steps must lie in [1, {n}], got {self.steps}")
        if self.cfg < 0 or self.stage1_cfg < 0:
            raise ConfigError("guidance scales must be non-negative")
        if self.temperature < 0:
            raise ConfigError("temperature must be positive (0 means greedy)")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ConfigError("clip_x0 must be positive or null")

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_unmask_counts(S: int, n: int) -> list[int]:
    """Tokens revealed at each of ``S`` steps under the cosine masking schedule.

    Hidden count after step s is ``ceil(n cos(pi/2 s/S))``, clamped so every
    step reveals at least one token and ``masked(S) = 0``.
    """
    if not 1 <= S <= n:
        raise ConfigError(f"need 1 <= steps <= {n}, got {S}")
    masked = [n]
    for s in range(1, S):
        raw = math.ceil(n * math.cos(math.pi / 2 * s / S))
        masked.append(min(masked[-1] - 1, max(raw, S - s)))
    masked.append(0)
    return [masked[s - 1] - masked[s] for s in range(1, S + 1)]


def masked_counts(S: int, n: int) -> list[int]:
    counts = cosine_unmask_counts(S, n)
    return [n - int(np.sum(counts[:s])) for s in range(S + 1)]


def linear_guidance(omega: float, revealed: int, n: int) -> float:
    """Guidance ramping from 1 (nothing revealed) to ``omega`` (all revealed)."""
    if not 0 <= revealed <= n:
        raise ConfigError(f"revealed count {revealed} outside [0, {n}]")
    return 1.0 + (omega - 1.0) * (revealed / n)


def generate_continuous(stage2, denoiser, schedule: NoiseSchedule, classes, tokens, config: GenerationConfig,
                        sample_ids=None, trace: list | None = None) -> np.ndarray:
    """Unmask all latent cells given discrete grids; returns (B, n, d).

    Randomness is keyed by (seed, sample id, step, position), so results do
    not depend on how samples are batched.
    """
    cfg2 = stage2.config
    n, d = cfg2.n, cfg2.d
    config.validate(n)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    B = len(classes)
    sample_ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    orders = np.stack([rngmod.stream(config.seed, "order", int(i)).permutation(n) for i in sample_ids])
    if config.diffusion_steps:
        schedule = schedule.respaced(config.diffusion_steps)
    guided = config.cfg != 1.0
    latents = np.zeros((B, n, d))
    revealed = 0
    with ad.no_grad():
        for step, count in enumerate(cosine_unmask_counts(config.steps, n)):
            plan = MaskPlan(orders, n - revealed)
            omega = linear_guidance(config.cfg, revealed, n) if config.linear_guidance else config.cfg
            targets = orders[:, revealed:revealed + count]
            if guided:
                # unconditional half gets placeholder classes/tokens; they are never read
                cond = stage2.forward_condition(
                    np.concatenate([classes, np.zeros(B, dtype=np.int64)]),
                    np.concatenate([latents, latents]),
                    MaskPlan(np.concatenate([orders, orders]), n - revealed),
                    None if tokens is None else np.concatenate([tokens, np.zeros_like(tokens)]),
                    np.concatenate([np.zeros(B, bool), np.ones(B, bool)]),
                )
                z = gather_cells(cond, np.concatenate([targets, targets])).data
                z_c, z_u = z[: B * count], z[B * count:]
            else:
                cond = stage2.forward_condition(classes, latents, plan, tokens, np.zeros(B, bool))
                z_c, z_u = gather_cells(cond, targets).data, None
            gens = [
                rngmod.stream(config.seed, "token", int(sample_ids[b]), step, int(p))
                for b in range(B) for p in targets[b]
            ]
            noise = draw_sampling_noise(gens, schedule, d)
            x = sample_token(denoiser, z_c, z_u, omega, schedule, noise, config.clip_x0)
            np.put_along_axis(latents, targets[:, :, None], x.reshape(B, count, d), axis=1)
            if trace is not None:
                trace.append({"step": step, "revealed_before": revealed, "positions": targets.copy(),
                              "omega": omega})
            revealed += count
    return latents


def generate(stage1, stage2, denoiser, schedule: NoiseSchedule, classes, config: GenerationConfig,
             sample_ids=None, tokens=None):
    """Full two-stage sampling; returns ``(tokens (B, n), latents (B, n, d))``."""
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    sample_ids = np.arange(len(classes)) if sample_ids is None else np.asarray(sample_ids)
    if stage2.config.fusion == "none":
        tokens = None if tokens is None else np.asarray(tokens)
        if tokens is None and stage1 is not None:
            tokens = sample_discrete(stage1, classes, config.temperature, config.stage1_cfg, config.seed, sample_ids)
    elif tokens is None:
        tokens = sample_discrete(stage1, classes, config.temperature, config.stage1_cfg, config.seed, sample_ids)
    latents = generate_continuous(stage2, denoiser, schedule, classes, tokens, config, sample_ids)
    return tokens, latents


def sample_many(stage1, stage2, denoiser, schedule: NoiseSchedule, classes, config: GenerationConfig,
                chunk: int = 250, workers: int = 1):
    """Generate a large batch in fixed-size chunks, optionally on a thread pool.

    Chunk boundaries do not depend on ``workers`` and every random draw is
    keyed by sample id, so the output is identical for any worker count.
    """
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    starts = list(range(0, len(classes), chunk))

    def one(s):
        ids = np.arange(s, min(s + chunk, len(classes)))
        return generate(stage1, stage2, denoiser, schedule, classes[ids], config, ids)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    n = stage2.config.n
    tokens = np.concatenate([np.zeros((len(p[1]), n), np.int64) if p[0] is None else p[0] for p in parts])
    return tokens, np.concatenate([p[1] for p in parts])
