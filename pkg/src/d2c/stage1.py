"""Class-conditional causal transformer over discrete token grids.

Llama-style blocks (RMSNorm, causal self-attention with 2D RoPE, SwiGLU) read
``[class token, q_0, ..., q_{m-1}]`` and emit next-token logits at every
position. Classifier-free guidance uses a dedicated fake-class embedding row.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L
from . import rng as rngmod
from .autodiff import Tensor
from .errors import ConfigError, InputError


@dataclass
class Stage1Config:
    K: int = 32
    C: int = 4
    h: int = 8
    w: int = 8
    layers: int = 2
    heads: int = 4
    width: int = 64
    ffn_hidden: int | None = None
    p_drop: float = 0.1
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("width must be divisible by heads")
        if (self.width // self.heads) % 4:
            raise ConfigError("head dim must be divisible by 4 for 2D RoPE")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")

    @property
    def ffn(self) -> int:
        return self.ffn_hidden or L.ffn_hidden(self.width)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def fake_class(self) -> int:
        return self.C

    def to_dict(self) -> dict:
        return asdict(self)


class Stage1Model:
    def __init__(self, config: Stage1Config, seed: int = 0):
        self.config = cfg = config
        g = rngmod.stream(seed, "stage1-init")
        ps = self.params = L.ParamStore()
        ps.add("tok_emb", L.normal(g, cfg.K, cfg.width))
        ps.add("cls_emb", L.normal(g, cfg.C + 1, cfg.width))
        for i in range(cfg.layers):
            p = f"blocks.{i}"
            L.init_norm(ps, f"{p}.norm1", cfg.width)
            L.init_attention(ps, g, f"{p}.attn", cfg.width)
            L.init_norm(ps, f"{p}.norm2", cfg.width)
            L.init_ffn(ps, g, f"{p}.ffn", cfg.width, cfg.ffn)
        L.init_norm(ps, "norm_f", cfg.width)
        ps.add("head", L.normal(g, cfg.width, cfg.K))
        self._rope_cache: dict[int, tuple] = {}

    def _rope(self, seq_len: int):
        if seq_len not in self._rope_cache:
            cfg = self.config
            # class prefix is unrotated; token q_j sits at its own raster cell j
            pos = np.arange(seq_len) - 1
            self._rope_cache[seq_len] = L.rope2d_tables(pos, cfg.h, cfg.w, cfg.width // cfg.heads, cfg.rope_base)
        return self._rope_cache[seq_len]

    def forward_logits(self, classes, tokens) -> Tensor:
        """Logits ``(B, m+1, K)`` for class ids ``(B,)`` and token prefixes ``(B, m)``."""
        cfg, ps = self.config, self.params
        classes = np.asarray(classes, dtype=np.int64).reshape(-1)
        tokens = np.asarray(tokens, dtype=np.int64).reshape(len(classes), -1)
        if tokens.shape[1] > cfg.n:
            raise InputError(f"prefix of length {tokens.shape[1]} exceeds grid size {cfg.n}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.K):
            raise InputError(f"token index outside vocabulary [0, {cfg.K})")
        if classes.min() < 0 or classes.max() > cfg.C:
            raise InputError(f"class id outside [0, {cfg.C}]")
        x = ad.concat([
            ad.embedding(ps["cls_emb"], classes[:, None]),
            ad.embedding(ps["tok_emb"], tokens),
        ], axis=1)
        s = x.shape[1]
        rope = self._rope(s)
        causal = np.tril(np.ones((s, s), dtype=bool))
        for i in range(cfg.layers):
            p = f"blocks.{i}"
            a = L.norm(ps, f"{p}.norm1", x)
            x = x + L.attention(ps, f"{p}.attn", a, a, cfg.heads, mask=causal, rope_q=rope, rope_k=rope)
            x = x + L.ffn(ps, f"{p}.ffn", L.norm(ps, f"{p}.norm2", x))
        return ad.matmul(L.norm(ps, "norm_f", x), ps["head"])


def apply_class_drop(classes: np.ndarray, p_drop: float, fake: int, g: np.random.Generator) -> np.ndarray:
    drop = g.random(len(classes)) < p_drop
    return np.where(drop, fake, classes)


def loss_stage1(model: Stage1Model, classes, tokens, g: np.random.Generator | None = None) -> Tensor:
    """Mean next-token cross-entropy over all grid positions, with class dropout."""
    cfg = model.config
    classes = np.asarray(classes, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(classes) == 0:
        raise InputError("empty batch")
    if cfg.p_drop > 0.0:
        if g is None:
            raise InputError("class dropout needs a random generator")
        classes = apply_class_drop(classes, cfg.p_drop, cfg.fake_class, g)
    logits = model.forward_logits(classes, tokens[:, :-1])
    return ad.cross_entropy(logits, tokens)


def guided_logits(cond: np.ndarray, uncond: np.ndarray, omega: float) -> np.ndarray:
    """Logit-space guidance ``u + omega * (c - u)``; omega == 1 returns ``cond`` exactly."""
    if omega == 1.0:
        return cond.copy()
    return uncond + omega * (cond - uncond)


def _categorical(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), len(probs) - 1))


def sample_discrete(model: Stage1Model, classes, temperature: float = 1.0, omega: float = 1.0,
                    seed: int = 0, sample_ids=None, return_probs: bool = False):
    """Sample full grids left to right, one keyed random stream per sample.

    ``temperature == 0`` selects the argmax (the zero-temperature limit).
    Returns ``(B, h*w)`` token indices.
    """
    if temperature < 0:
        raise ConfigError("temperature must be positive (0 means greedy)")
    if omega < 0:
        raise ConfigError("guidance scale must be non-negative")
    cfg = model.config
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    B = len(classes)
    sample_ids = np.arange(B) if sample_ids is None else np.asarray(sample_ids)
    streams = [rngmod.stream(seed, "stage1-sample", int(i)) for i in sample_ids]
    guided = omega != 1.0
    tokens = np.zeros((B, 0), dtype=np.int64)
    step_probs = []
    with ad.no_grad():
        for _ in range(cfg.n):
            if guided:
                both = model.forward_logits(
                    np.concatenate([classes, np.full(B, cfg.fake_class)]), np.concatenate([tokens, tokens])
                ).data[:, -1]
                g = guided_logits(both[:B], both[B:], omega)
            else:
                g = model.forward_logits(classes, tokens).data[:, -1]
            if temperature == 0:
                nxt = g.argmax(axis=-1)
            else:
                z = g / temperature
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=-1, keepdims=True)
                if return_probs:
                    step_probs.append(p)
                nxt = np.array([_categorical(p[b], streams[b].random()) for b in range(B)])
            tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    if return_probs:
        return tokens, step_probs
    return tokens


def softmax_entropy(logits: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return float(-(p * np.log(np.where(p > 0, p, 1.0))).sum())
