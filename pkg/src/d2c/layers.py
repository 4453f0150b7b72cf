"""Transformer pieces shared by both stages, built on :mod:`d2c.autodiff`."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

INIT_STD = 0.02


class ParamStore:
    """Ordered name -> Tensor map with a frozen subset."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=trainable, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def freeze(self) -> None:
        for t in self.tensors.values():
            t.requires_grad = False

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(state)
        extra = set(state) - set(self.tensors)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.tensors[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.tensors[k].shape}")
            self.tensors[k].data = np.array(v, dtype=np.float64)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def normal(g: np.random.Generator, *shape: int, std: float = INIT_STD) -> np.ndarray:
    return std * g.standard_normal(shape)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else y + b


# ----------------------------------------------------------------------------
# 2D rotary position embedding


def rope2d_tables(positions: np.ndarray, h: int, w: int, head_dim: int, base: float = 10000.0):
    """cos/sin tables ``(len(positions), head_dim)`` for raster-order positions.

    The first half of each head is rotated by row angles, the second half by
    column angles; channels are rotated in adjacent pairs. A negative position
    means "no rotation" (used for the class prefix).
    """
    if head_dim % 4:
        raise ConfigError(f"2D RoPE needs head_dim divisible by 4, got {head_dim}")
    half = head_dim // 2
    freqs = base ** (-np.arange(0, half, 2) / half)  # (half/2,)
    positions = np.asarray(positions)
    rows = np.where(positions >= 0, positions // w, 0).astype(np.float64)
    cols = np.where(positions >= 0, positions % w, 0).astype(np.float64)
    ang = np.concatenate([np.outer(rows, freqs), np.outer(cols, freqs)], axis=1)  # (P, half)
    ang = np.repeat(ang, 2, axis=1)  # pair layout
    return np.cos(ang), np.sin(ang)


def _pair_swap_matrix(head_dim: int) -> np.ndarray:
    """R with (x @ R)[2i] = -x[2i+1], (x @ R)[2i+1] = x[2i]."""
    r = np.zeros((head_dim, head_dim))
    for i in range(0, head_dim, 2):
        r[i + 1, i] = -1.0
        r[i, i + 1] = 1.0
    return r


_SWAP_CACHE: dict[int, np.ndarray] = {}


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate ``x[..., S, head_dim]`` with tables from :func:`rope2d_tables`."""
    hd = x.shape[-1]
    if hd not in _SWAP_CACHE:
        _SWAP_CACHE[hd] = _pair_swap_matrix(hd)
    return x * cos + ad.matmul(x, _SWAP_CACHE[hd]) * sin


def rope2d(v: np.ndarray, position: int, h: int, w: int, base: float = 10000.0) -> np.ndarray:
    """Plain-array rotation of one head vector at a raster position."""
    cos, sin = rope2d_tables(np.array([position]), h, w, v.shape[-1], base)
    return v * cos[0] + (v @ _pair_swap_matrix(v.shape[-1])) * sin[0]


# ----------------------------------------------------------------------------
# attention


def init_attention(ps: ParamStore, g: np.random.Generator, prefix: str, d_model: int,
                   d_kv: int | None = None) -> None:
    d_kv = d_model if d_kv is None else d_kv
    ps.add(f"{prefix}.wq", normal(g, d_model, d_model))
    ps.add(f"{prefix}.wk", normal(g, d_kv, d_model))
    ps.add(f"{prefix}.wv", normal(g, d_kv, d_model))
    ps.add(f"{prefix}.wo", normal(g, d_model, d_model))


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, dm = x.shape
    return x.reshape(b, s, heads, dm // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, s, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * hd)


def attention(ps: ParamStore, prefix: str, x_q: Tensor, x_kv: Tensor, heads: int,
              mask: np.ndarray | None = None, rope_q=None, rope_k=None,
              return_weights: bool = False):
    """Multi-head attention ``softmax(Q K^T / sqrt(hd)) V`` followed by ``W_o``.

    ``x_q`` is ``(B, Sq, D)`` and ``x_kv`` is ``(B, Sk, Dkv)``. ``mask`` is a
    boolean array broadcastable to ``(B, heads, Sq, Sk)`` (True = attend).
    """
    d_model = ps[f"{prefix}.wq"].shape[1]
    if d_model % heads:
        raise ConfigError(f"width {d_model} not divisible by {heads} heads")
    q = split_heads(ad.matmul(x_q, ps[f"{prefix}.wq"]), heads)
    k = split_heads(ad.matmul(x_kv, ps[f"{prefix}.wk"]), heads)
    v = split_heads(ad.matmul(x_kv, ps[f"{prefix}.wv"]), heads)
    if rope_q is not None:
        q = apply_rope(q, *rope_q)
    if rope_k is not None:
        k = apply_rope(k, *rope_k)
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = ad.softmax(scores, axis=-1, mask=mask)
    out = ad.matmul(merge_heads(ad.matmul(weights, v)), ps[f"{prefix}.wo"])
    return (out, weights) if return_weights else out


def init_ffn(ps: ParamStore, g: np.random.Generator, prefix: str, d_model: int, hidden: int) -> None:
    ps.add(f"{prefix}.w1", normal(g, d_model, hidden))
    ps.add(f"{prefix}.w3", normal(g, d_model, hidden))
    ps.add(f"{prefix}.w2", normal(g, hidden, d_model))


def ffn(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.swiglu(x, ps[f"{prefix}.w1"], ps[f"{prefix}.w3"], ps[f"{prefix}.w2"])


def ffn_hidden(d_model: int) -> int:
    """Llama-style SwiGLU width: 2/3 of 4*d, rounded up to a multiple of 8."""
    return int(8 * math.ceil((8 * d_model / 3) / 8))


def init_norm(ps: ParamStore, name: str, d: int) -> None:
    ps.add(name, np.ones(d))


def norm(ps: ParamStore, name: str, x: Tensor, eps: float = 1e-6) -> Tensor:
    return ad.rms_norm(x, ps[name], eps)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sinusoidal timestep features, shape ``(len(t), dim)``."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb
