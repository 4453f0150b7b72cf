"""Per-token diffusion head: noise schedule, MLP noise predictor, loss and sampler."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from . import rng as rngmod
from .autodiff import Tensor
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t-1]`` holds the cumulative signal level at step t (t = 1..T).

    ``timesteps[t-1]`` is the training-time step index fed to the network; it
    differs from t only for respaced (subsampled) inference schedules.
    """

    alpha_bar: np.ndarray
    timesteps: np.ndarray
    kind: str = "cosine"

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def alpha_bar_at(self, t: int) -> float:
        """``alpha_bar`` with the convention alpha_bar_0 = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    @property
    def alphas(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        return self.alpha_bar / prev

    def meets_endpoint_bounds(self) -> bool:
        return bool(self.alpha_bar[0] >= 0.99 and self.alpha_bar[-1] <= 0.05)

    def respaced(self, steps: int) -> "NoiseSchedule":
        """Uniformly subsampled schedule with ``steps`` denoising steps."""
        if not 1 <= steps <= self.T:
            raise ConfigError(f"cannot respace {self.T} steps to {steps}")
        keep = np.unique(np.round(np.linspace(1, self.T, steps)).astype(int))
        return NoiseSchedule(self.alpha_bar[keep - 1].copy(), self.timesteps[keep - 1].copy(), self.kind)


def cosine_alpha_bar(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2  # noqa: E731
    out, prod = np.empty(T), 1.0
    for t in range(1, T + 1):
        beta = min(1.0 - f(t / T) / f((t - 1) / T), max_beta)
        prod *= 1.0 - beta
        out[t - 1] = prod
    return out


def linear_alpha_bar(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    betas = np.linspace(beta_start, beta_end, T)
    return np.cumprod(1.0 - betas)


def make_schedule(T: int = 100, kind: str = "cosine") -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"need at least 2 diffusion steps, got {T}")
    if kind == "cosine":
        ab = cosine_alpha_bar(T)
    elif kind == "linear":
        ab = linear_alpha_bar(T)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if not (np.all(np.diff(ab) < 0) and ab[0] <= 1.0 and ab[-1] > 0.0):
        raise ConfigError("schedule is not strictly decreasing within (0, 1]")
    return NoiseSchedule(ab, np.arange(1, T + 1), kind)


def add_noise(x0, t: int, eps, schedule: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be an int or an int array."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise InputError(f"timestep outside [1, {schedule.T}]")
    ab = schedule.alpha_bar[t_arr - 1]
    if ab.ndim:
        ab = ab[..., None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def cfg_noise(eps_cond, eps_uncond, omega: float):
    """``eps_u + omega * (eps_c - eps_u)``; omega == 1 returns ``eps_cond`` exactly."""
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise InputError("conditional and unconditional predictions differ in shape")
    if omega == 1.0:
        return eps_cond.copy()
    return eps_uncond + omega * (eps_cond - eps_uncond)


@dataclass
class DiffusionConfig:
    d: int = 4
    cond_dim: int = 64
    width: int = 64
    blocks: int = 3
    T: int = 100
    schedule: str = "cosine"
    batch_mul: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


class DenoiserMLP:
    """Residual MLP predicting the noise in ``x_t`` given step ``t`` and condition ``z``."""

    def __init__(self, config: DiffusionConfig, seed: int = 0):
        self.config = cfg = config
        g = rngmod.stream(seed, "denoiser-init")
        ps = self.params = L.ParamStore()
        W = cfg.width
        ps.add("in.w", L.normal(g, cfg.d, W, std=1.0 / math.sqrt(cfg.d)))
        ps.add("in.b", np.zeros(W))
        ps.add("cond.w", L.normal(g, cfg.cond_dim, W, std=1.0 / math.sqrt(cfg.cond_dim)))
        ps.add("time.w", L.normal(g, W, W, std=1.0 / math.sqrt(W)))
        ps.add("cond.b", np.zeros(W))
        for i in range(cfg.blocks):
            p = f"blocks.{i}"
            L.init_norm(ps, f"{p}.norm", W)
            ps.add(f"{p}.w1", L.normal(g, W, W, std=1.0 / math.sqrt(W)))
            ps.add(f"{p}.wc", L.normal(g, W, W, std=1.0 / math.sqrt(W)))
            ps.add(f"{p}.b1", np.zeros(W))
            ps.add(f"{p}.w2", L.normal(g, W, W, std=0.02))
            ps.add(f"{p}.b2", np.zeros(W))
        L.init_norm(ps, "norm_f", W)
        ps.add("out.w", L.normal(g, W, cfg.d, std=0.02))
        ps.add("out.b", np.zeros(cfg.d))

    def _time_features(self, t: np.ndarray) -> np.ndarray:
        return L.sinusoidal_embedding(t, self.config.width)

    def forward(self, x_t, t, z) -> Tensor:
        """``x_t`` (N, d), integer steps ``t`` (N,), condition ``z`` (N, cond_dim)."""
        ps, cfg = self.params, self.config
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        temb = self._time_features(t)
        c = ad.silu(L.linear(z, ps["cond.w"], ps["cond.b"]) + ad.matmul(temb, ps["time.w"]))
        h = L.linear(x_t, ps["in.w"], ps["in.b"])
        for i in range(cfg.blocks):
            p = f"blocks.{i}"
            u = ad.matmul(L.norm(ps, f"{p}.norm", h), ps[f"{p}.w1"]) + ad.matmul(c, ps[f"{p}.wc"]) + ps[f"{p}.b1"]
            h = h + L.linear(ad.silu(u), ps[f"{p}.w2"], ps[f"{p}.b2"])
        return L.linear(L.norm(ps, "norm_f", h), ps["out.w"], ps["out.b"])

    def predict(self, x_t: np.ndarray, t, z: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x_t, t, z).data


def diffusion_loss(denoiser, z, x0, schedule: NoiseSchedule, g: np.random.Generator | None = None,
                   t=None, eps=None) -> Tensor:
    """Mean over tokens of ``||eps - eps_theta(x_t | t, z)||^2``.

    ``t`` and ``eps`` are drawn from ``g`` unless injected. ``denoiser`` is a
    :class:`DenoiserMLP` or any callable ``(x_t, t, z) -> Tensor``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    if z.shape[0] != n:
        raise InputError(f"{z.shape[0]} conditions for {n} tokens")
    if t is None:
        t = g.integers(1, schedule.T + 1, size=n)
    if eps is None:
        eps = g.standard_normal((n, d))
    t = np.broadcast_to(np.asarray(t), (n,))
    x_t = add_noise(x0, t, eps, schedule)
    fn = denoiser.forward if hasattr(denoiser, "forward") else denoiser
    pred = fn(x_t, schedule.timesteps[t - 1], z)
    return ad.mse(pred, eps) * float(d)


def draw_sampling_noise(generators, schedule: NoiseSchedule, d: int) -> np.ndarray:
    """Per-token noise ``(N, T + 1, d)``: row 0 is x_T, row k feeds step T - k + 1."""
    return np.stack([g.standard_normal((schedule.T + 1, d)) for g in generators])


def sample_token(denoiser, z_cond, z_uncond, omega: float, schedule: NoiseSchedule,
                 noise: np.ndarray, clip_x0: float | None = None) -> np.ndarray:
    """Ancestral DDPM sampling of ``N`` tokens in parallel, with noise-space guidance.

    ``z_uncond`` may be ``None`` (no guidance). ``noise`` comes from
    :func:`draw_sampling_noise`. With ``clip_x0`` the implied clean sample is
    clamped to ``[-clip_x0, clip_x0]`` before each update and the noise
    estimate is recomputed from it. This guards the first steps of a cosine
    schedule, where 1/sqrt(alpha_t) amplifies small prediction errors.
    Returns x_0 of shape (N, d).
    """
    predict = denoiser.predict if hasattr(denoiser, "predict") else denoiser
    z_cond = np.asarray(z_cond)
    n = z_cond.shape[0]
    guided = z_uncond is not None and omega != 1.0
    z_both = np.concatenate([z_cond, z_uncond]) if guided else z_cond
    x = noise[:, 0].copy()
    alphas = schedule.alphas
    for k, t in enumerate(range(schedule.T, 0, -1), start=1):
        net_t = schedule.timesteps[t - 1]
        if guided:
            out = predict(np.concatenate([x, x]), np.full(2 * n, net_t), z_both)
            eps_hat = cfg_noise(out[:n], out[n:], omega)
        else:
            eps_hat = predict(x, np.full(n, net_t), z_cond)
        a_t = alphas[t - 1]
        ab_t = schedule.alpha_bar_at(t)
        ab_prev = schedule.alpha_bar_at(t - 1)
        if clip_x0 is not None:
            x0 = np.clip((x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t), -clip_x0, clip_x0)
            eps_hat = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
        x = (x - (1.0 - a_t) / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(a_t)
        if t > 1:
            sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - a_t))
            x = x + sigma * noise[:, k]
    return x
