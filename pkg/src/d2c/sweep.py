"""Ablation sweeps over generation settings and q-former shape."""
from __future__ import annotations

import copy
import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .diffusion import make_schedule
from .errors import ConfigError
from .metrics import EvalReport, evaluate
from .pipeline import sample_many

log = logging.getLogger("d2c.sweep")

# axes that only change sampling reuse one trained model
GENERATION_AXES = {"cfg": "generation.cfg", "temperature": "generation.temperature", "steps": "generation.steps"}
# axes that change the architecture need one training run per grid point
TRAINING_AXES = {"queries": "stage2.queries", "qformer_arch": "stage2.qformer_arch"}
AXES = tuple(GENERATION_AXES) + tuple(TRAINING_AXES)


@dataclass
class SweepResult:
    axis: str
    values: list
    reports: list[EvalReport] = field(default_factory=list)

    @property
    def pooled(self) -> list[float]:
        return [r.pooled for r in self.reports]

    def summary(self) -> dict:
        y = np.asarray(self.pooled)
        best = int(np.argmin(y))
        diffs = np.diff(y)
        return {
            "axis": self.axis,
            "best_value": self.values[best],
            "best_pooled": float(y[best]),
            "interior_minimum": 0 < best < len(y) - 1,
            "monotone_increasing": bool(np.all(diffs >= 0)),
            "monotone_decreasing": bool(np.all(diffs <= 0)),
        }

    def csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        classes = sorted(self.reports[0].per_class) if self.reports else []
        wr.writerow([self.axis, "pooled", "token_match"] + [f"class_{c}" for c in classes])
        for v, r in zip(self.values, self.reports):
            tm = "" if r.token_match is None else f"{r.token_match:.6g}"
            wr.writerow([_fmt(v), f"{r.pooled:.6g}", tm] + [f"{r.per_class[c]:.6g}" for c in classes])
        return buf.getvalue()

    def plot_data(self) -> dict:
        return {"x": [_fmt(v) for v in self.values], "y": [float(f"{p:.6g}") for p in self.pooled],
                "xlabel": self.axis, "ylabel": "pooled frechet proxy", "summary": self.summary()}


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def _coerce(axis: str, value):
    if axis == "qformer_arch":
        return str(value)
    if axis in ("steps", "queries"):
        return int(value)
    return float(value)


def sweep(axis: str, grid, cfg: RunConfig, stage1, stage2_run=None, train_fn=None,
          workers: int = 1) -> SweepResult:
    """Evaluate one report per grid value.

    Generation axes reuse ``stage2_run``; architecture axes call
    ``train_fn(config) -> Stage2Run`` for each value (the caller decides
    whether that trains or loads from a cache).
    """
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    from .train import world_from

    world = world_from(cfg)
    values = [_coerce(axis, v) for v in grid]
    result = SweepResult(axis, values)
    classes = np.repeat(np.arange(world.C), cfg.generation.samples_per_class)
    for v in values:
        point = copy.deepcopy(cfg)
        if axis in GENERATION_AXES:
            setattr(point.generation, axis, v)
            run = stage2_run
            if run is None:
                raise ConfigError("generation sweeps need a trained second stage")
        else:
            if train_fn is None:
                raise ConfigError(f"sweeping {axis!r} needs a training function")
            setattr(point.stage2, axis, v)
            point.sync()
            run = train_fn(point)
        point.generation.validate(world.n)
        schedule = make_schedule(point.diffusion.T, point.diffusion.schedule)
        tokens, latents = sample_many(stage1, run.stage2, run.denoiser, schedule, classes, point.generation,
                                      workers=workers)
        report = evaluate(world, classes, latents, tokens)
        log.info("sweep %s=%s pooled %.6g", axis, v, report.pooled)
        result.reports.append(report)
    return result
