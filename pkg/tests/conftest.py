import pytest

from d2c.config import RunConfig, TrainConfig, WorldConfig
from d2c.diffusion import DiffusionConfig
from d2c.pipeline import GenerationConfig
from d2c.stage1 import Stage1Config
from d2c.stage2 import Stage2Config


def tiny_config(fusion: str = "cross_attention") -> RunConfig:
    """A run small enough that both stages train in about a second."""
    cfg = RunConfig(
        seed=3,
        data_seed=5,
        world=WorldConfig(seed=2, C=2, K=6, h=2, w=2, d=2, rho=0.1, sigma=0.5),
        stage1=Stage1Config(width=8, heads=2, layers=1),
        stage2=Stage2Config(width=8, heads=2, enc_layers=1, dec_layers=1, prefix=2, queries=2, cond_dim=4,
                            fusion=fusion),
        diffusion=DiffusionConfig(width=8, blocks=1, T=10),
        train1=TrainConfig(epochs=2, batch_size=8, dataset_size=32, base_lr=1e-2, ema_momentum=0.9),
        train2=TrainConfig(epochs=2, batch_size=8, dataset_size=32, base_lr=1e-2, ema_momentum=0.9),
        generation=GenerationConfig(steps=2, cfg=1.5, samples_per_class=4),
    )
    return cfg.sync()


@pytest.fixture
def tiny():
    return tiny_config


# summary lines appended by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
