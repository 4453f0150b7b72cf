"""Seeded stand-in for a paired discrete/continuous image tokenizer.

A ``SyntheticWorld`` fixes a codebook, one token template per class and a
per-class latent offset. A sample of class ``c`` is generated cell by cell:

    q_ij = template_c[ij]          with prob 1 - rho, else uniform over [0, K)
    z_ij = codebook[q_ij] + mu_c + sigma * eps,   eps ~ N(0, I_d)

so the discrete grid carries the coarse structure of the latent grid and the
class-conditional statistics are available in closed form.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from . import rng as rngmod
from .errors import ConfigError, FormatError, InputError

MAGIC = b"D2CD"
VERSION = 1
_HEADER = struct.Struct("<4s7I")


@dataclass(frozen=True)
class TokenGrid:
    h: int
    w: int
    indices: np.ndarray  # (h*w,) int, raster order

    def as_2d(self) -> np.ndarray:
        return self.indices.reshape(self.h, self.w)

    @classmethod
    def from_2d(cls, grid: np.ndarray) -> "TokenGrid":
        h, w = grid.shape
        return cls(h, w, np.ascontiguousarray(grid).reshape(-1))


@dataclass(frozen=True)
class LatentGrid:
    h: int
    w: int
    d: int
    values: np.ndarray  # (h*w, d) float, raster order

    def as_3d(self) -> np.ndarray:
        return self.values.reshape(self.h, self.w, self.d)

    @classmethod
    def from_3d(cls, grid: np.ndarray) -> "LatentGrid":
        h, w, d = grid.shape
        return cls(h, w, d, np.ascontiguousarray(grid).reshape(h * w, d))


@dataclass(frozen=True)
class SyntheticWorld:
    seed: int
    C: int
    K: int
    h: int
    w: int
    d: int
    rho: float
    sigma: float
    codebook: np.ndarray  # (K, d)
    templates: np.ndarray  # (C, h*w)
    class_offsets: np.ndarray  # (C, d)

    @property
    def n(self) -> int:
        return self.h * self.w


def build_world(seed: int, C: int = 4, K: int = 32, h: int = 8, w: int = 8, d: int = 4,
                rho: float = 0.1, sigma: float = 0.5) -> SyntheticWorld:
    if C < 1 or K < 2 or h < 1 or w < 1 or d < 1:
        raise ConfigError(f"invalid world sizes C={C} K={K} h={h} w={w} d={d}")
    if not 0.0 <= rho < 1.0:
        raise ConfigError(f"rho must lie in [0, 1), got {rho}")
    if not sigma > 0.0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    g = rngmod.stream(seed, "world")
    codebook = g.standard_normal((K, d))
    templates = g.integers(0, K, size=(C, h * w))
    offsets = 0.5 * g.standard_normal((C, d))
    return SyntheticWorld(seed, C, K, h, w, d, float(rho), float(sigma), codebook, templates, offsets)


def _check_class(world: SyntheticWorld, cls: int) -> None:
    if not 0 <= cls < world.C:
        raise InputError(f"class {cls} outside [0, {world.C})")


def sample_pair(world: SyntheticWorld, cls: int, rng: np.random.Generator) -> tuple[TokenGrid, LatentGrid]:
    _check_class(world, cls)
    n = world.n
    corrupt = rng.random(n) < world.rho
    replacement = rng.integers(0, world.K, size=n)
    q = np.where(corrupt, replacement, world.templates[cls])
    eps = rng.standard_normal((n, world.d))
    z = world.codebook[q] + world.class_offsets[cls] + world.sigma * eps
    return TokenGrid(world.h, world.w, q), LatentGrid(world.h, world.w, world.d, z)


def sample_index(world: SyntheticWorld, index: int, seed: int) -> tuple[int, TokenGrid, LatentGrid]:
    """Sample number ``index`` of the dataset keyed by ``seed``; class is ``index % C``."""
    cls = index % world.C
    q, z = sample_pair(world, cls, rngmod.stream(seed, "data", index))
    return cls, q, z


def generate_dataset(world: SyntheticWorld, count: int, seed: int, start: int = 0):
    """Arrays ``(classes (N,), tokens (N, n), latents (N, n, d))`` for indices start..start+count."""
    classes = np.empty(count, dtype=np.int64)
    tokens = np.empty((count, world.n), dtype=np.int64)
    latents = np.empty((count, world.n, world.d))
    for i in range(count):
        c, q, z = sample_index(world, start + i, seed)
        classes[i], tokens[i], latents[i] = c, q.indices, z.values
    return classes, tokens, latents


def cell_distribution(world: SyntheticWorld, cls: int) -> np.ndarray:
    """(h*w, K) probabilities of each codeword at each cell for class ``cls``."""
    _check_class(world, cls)
    p = np.full((world.n, world.K), world.rho / world.K)
    p[np.arange(world.n), world.templates[cls]] += 1.0 - world.rho
    return p


def oracle_class_stats(world: SyntheticWorld, cls: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-cell mean ``(h*w, d)`` and covariance ``(h*w, d, d)`` of z for a class."""
    p = cell_distribution(world, cls)
    mix_mean = p @ world.codebook
    centered = world.codebook[None, :, :] - mix_mean[:, None, :]
    between = np.einsum("nk,nki,nkj->nij", p, centered, centered)
    cov = between + world.sigma**2 * np.eye(world.d)[None]
    return mix_mean + world.class_offsets[cls], cov


def template_entropy(rho: float, K: int) -> float:
    """Entropy in nats of one corrupted-template cell."""
    p_hit = 1.0 - rho + rho / K
    p_miss = rho / K
    return float(-xlogy(p_hit, p_hit) - (K - 1) * xlogy(p_miss, p_miss))


def oracle_template_entropy(world: SyntheticWorld) -> float:
    return template_entropy(world.rho, world.K)


def expected_match_rate(rho: float, K: int) -> float:
    """Probability that a cell equals its class template."""
    return 1.0 - rho * (1.0 - 1.0 / K)


# ----------------------------------------------------------------------------
# binary record files


def record_dtype(n: int, d: int) -> np.dtype:
    return np.dtype([("cls", "<u4"), ("indices", "<u4", (n,)), ("values", "<f4", (n, d))])


def write_records(path: str | os.PathLike, C: int, K: int, h: int, w: int, d: int,
                  classes: np.ndarray, tokens: np.ndarray, latents: np.ndarray) -> None:
    """Write a dataset/samples file atomically (temp file + rename)."""
    count = len(classes)
    n = h * w
    rec = np.zeros(count, dtype=record_dtype(n, d))
    rec["cls"] = classes
    rec["indices"] = np.asarray(tokens).reshape(count, n)
    rec["values"] = np.asarray(latents).reshape(count, n, d)
    header = _HEADER.pack(MAGIC, VERSION, C, K, h, w, d, count)
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(rec.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_records(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("file too short for header")
    magic, version, C, K, h, w, d, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    dt = record_dtype(h * w, d)
    if len(raw) != _HEADER.size + count * dt.itemsize:
        raise FormatError("record payload length does not match header count")
    rec = np.frombuffer(raw, dtype=dt, offset=_HEADER.size, count=count)
    return {
        "C": C, "K": K, "h": h, "w": w, "d": d,
        "classes": rec["cls"].astype(np.int64),
        "tokens": rec["indices"].astype(np.int64),
        "latents": rec["values"].astype(np.float64),
    }
