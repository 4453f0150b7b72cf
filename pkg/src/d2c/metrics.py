"""Latent-space Fréchet proxy and the evaluation report."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .tokenizer import SyntheticWorld, oracle_class_stats

log = logging.getLogger("d2c.metrics")

MIN_SAMPLES_PER_CLASS = 500


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with ``a = V diag(w) V^T``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise InputError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(float((np.triu(a, 1) ** 2).sum()))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                vp = c * v[:, p] - s * v[:, q]
                vq = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = vp, vq
    else:
        raise NumericError("Jacobi eigensolver did not converge")
    return np.diag(a).copy(), v


def sqrtm_psd(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Symmetric square root; eigenvalues below ``-tol * max(1, |a|)`` are an error."""
    w, v = jacobi_eigh(a)
    limit = tol * max(1.0, float(np.abs(w).max()))
    if w.min() < -limit:
        raise NumericError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`` between two Gaussians, clamped at 0.

    The cross term is evaluated as ``tr((S1^{1/2} S2 S1^{1/2})^{1/2})``, which
    keeps every square root symmetric.
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    for c in (cov1, cov2):
        if not np.allclose(c, c.T, atol=1e-10 * max(1.0, np.abs(c).max())):
            raise NumericError("covariance is not symmetric")
    r1 = sqrtm_psd(cov1)
    middle = r1 @ cov2 @ r1
    cross = np.trace(sqrtm_psd(0.5 * (middle + middle.T)))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)
    return max(value, 0.0)


def frechet_proxy(gen_stats, ref_stats) -> float:
    """Mean per-cell Fréchet distance between two ``(means (n, d), covs (n, d, d))`` fits."""
    gm, gc = gen_stats
    rm, rc = ref_stats
    if np.shape(gm) != np.shape(rm) or np.shape(gc) != np.shape(rc):
        raise InputError("statistics shapes differ")
    gm, gc, rm, rc = (np.asarray(x, dtype=np.float64) for x in (gm, gc, rm, rc))
    if gm.ndim == 1:
        return frechet_distance(gm, gc, rm, rc)
    return float(np.mean([frechet_distance(gm[j], gc[j], rm[j], rc[j]) for j in range(len(gm))]))


def fit_cell_stats(latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell sample mean and covariance over samples: (N, n, d) -> ((n, d), (n, d, d))."""
    latents = np.asarray(latents, dtype=np.float64)
    mu = latents.mean(axis=0)
    centered = latents - mu
    cov = np.einsum("sni,snj->nij", centered, centered) / max(len(latents) - 1, 1)
    return mu, cov


@dataclass
class EvalReport:
    per_class: dict[int, float]
    pooled: float
    token_match: float | None
    per_class_match: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'class':>6} {'samples':>8} {'frechet':>12} {'token_match':>12}"]
        for c in sorted(self.per_class):
            tm = self.per_class_match.get(c)
            lines.append(f"{c:>6d} {self.counts[c]:>8d} {self.per_class[c]:>12.6g} "
                         f"{'' if tm is None else format(tm, '.6g'):>12}")
        tm = "" if self.token_match is None else format(self.token_match, ".6g")
        lines.append(f"{'pooled':>6} {sum(self.counts.values()):>8d} {self.pooled:>12.6g} {tm:>12}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "samples", "frechet", "token_match"])
        for c in sorted(self.per_class):
            tm = self.per_class_match.get(c)
            wr.writerow([c, self.counts[c], f"{self.per_class[c]:.6g}", "" if tm is None else f"{tm:.6g}"])
        tm = "" if self.token_match is None else f"{self.token_match:.6g}"
        wr.writerow(["pooled", sum(self.counts.values()), f"{self.pooled:.6g}", tm])
        return buf.getvalue()


def evaluate(world: SyntheticWorld, classes, latents, tokens=None) -> EvalReport:
    """Per-class proxy against the world's exact statistics, plus template match rate."""
    classes = np.asarray(classes, dtype=np.int64)
    latents = np.asarray(latents, dtype=np.float64).reshape(len(classes), world.n, world.d)
    per_class, matches, counts, warnings = {}, {}, {}, []
    for c in range(world.C):
        sel = classes == c
        counts[c] = int(sel.sum())
        if counts[c] < 2:
            raise InputError(f"class {c} has {counts[c]} samples; need at least 2")
        if counts[c] < MIN_SAMPLES_PER_CLASS:
            msg = (f"class {c}: only {counts[c]} samples (< {MIN_SAMPLES_PER_CLASS}); "
                   "covariance estimates are noisy, treat the proxy as a rough figure")
            warnings.append(msg)
            log.warning(msg)
        per_class[c] = frechet_proxy(fit_cell_stats(latents[sel]), oracle_class_stats(world, c))
        if tokens is not None:
            matches[c] = float((np.asarray(tokens)[sel] == world.templates[c]).mean())
    token_match = None
    if tokens is not None:
        token_match = float((np.asarray(tokens) == world.templates[classes]).mean())
    pooled = float(np.mean(list(per_class.values())))
    return EvalReport(per_class, pooled, token_match, matches, counts, warnings)
