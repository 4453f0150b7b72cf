"""Run configuration: nested dataclasses with a lossless JSON round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .diffusion import DiffusionConfig
from .errors import ConfigError
from .pipeline import GenerationConfig
from .stage1 import Stage1Config
from .stage2 import Stage2Config


@dataclass
class WorldConfig:
    seed: int = 0
    C: int = 4
    K: int = 32
    h: int = 8
    w: int = 8
    d: int = 4
    rho: float = 0.1
    sigma: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    dataset_size: int = 20000
    base_lr: float = 5e-5
    reference_batch: int = 256
    warmup_fraction: float = 0.125
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    ema_momentum: float = 0.9999
    max_steps: int | None = None
    log_every: int = 50

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.dataset_size < self.batch_size:
            raise ConfigError("epochs/batch_size/dataset_size out of range")
        if self.base_lr <= 0 or not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("learning-rate settings out of range")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ConfigError("EMA momentum must lie in [0, 1)")


@dataclass
class RunConfig:
    seed: int = 0
    data_seed: int = 1
    world: WorldConfig = field(default_factory=WorldConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train1: TrainConfig = field(default_factory=TrainConfig)
    train2: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "RunConfig":
        """Copy world sizes into the model configs so they cannot disagree."""
        w = self.world
        for sub in (self.stage1, self.stage2):
            sub.K, sub.C, sub.h, sub.w = w.K, w.C, w.h, w.w
        self.stage2.d = self.diffusion.d = w.d
        self.stage2.discrete_dim = self.stage1.width
        self.diffusion.cond_dim = self.stage2.cond_dim
        return self

    def validate(self) -> None:
        self.train1.validate()
        self.train2.validate()
        self.generation.validate(self.world.h * self.world.w)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kinds = {
            "world": WorldConfig, "stage1": Stage1Config, "stage2": Stage2Config,
            "diffusion": DiffusionConfig, "train1": TrainConfig, "train2": TrainConfig,
            "generation": GenerationConfig,
        }
        kwargs = {}
        for k, v in d.items():
            if k in kinds:
                kwargs[k] = _build(kinds[k], v)
            elif k in ("seed", "data_seed"):
                kwargs[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


def _build(kind, values: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} fields: {sorted(unknown)}")
    return kind(**values)


def set_path(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Override one field from a ``section.field=value`` CLI string."""
    obj = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not hasattr(obj, p):
            raise ConfigError(f"unknown config section {p!r}")
        obj = getattr(obj, p)
    name = parts[-1]
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown config field {dotted!r}")
    current = getattr(obj, name)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    setattr(obj, name, value)


def desk_preset() -> RunConfig:
    """Settings sized for single-core CPU runs of the full two-stage pipeline."""
    cfg = RunConfig()
    cfg.train1 = TrainConfig(epochs=8, batch_size=64, dataset_size=8000, base_lr=4e-3, ema_momentum=0.99)
    cfg.stage2 = Stage2Config(width=32, heads=4, enc_layers=2, dec_layers=2, prefix=8, queries=16, cond_dim=32)
    cfg.diffusion = DiffusionConfig(width=64, blocks=3, T=100, batch_mul=2)
    cfg.train2 = TrainConfig(epochs=8, batch_size=32, dataset_size=6000, base_lr=8e-3, ema_momentum=0.99)
    cfg.generation = GenerationConfig(steps=8, cfg=1.0, diffusion_steps=25, clip_x0=6.0, samples_per_class=500)
    return cfg.sync()
