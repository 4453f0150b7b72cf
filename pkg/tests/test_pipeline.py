import math
from types import SimpleNamespace

import numpy as np
import pytest

from d2c.autodiff import Tensor
from d2c.diffusion import DenoiserMLP, DiffusionConfig, make_schedule
from d2c.errors import ConfigError
from d2c.pipeline import (GenerationConfig, cosine_unmask_counts, generate, generate_continuous, linear_guidance,
                          masked_counts, sample_many)
from d2c.stage1 import Stage1Config, Stage1Model
from d2c.stage2 import Stage2Config, Stage2Model
from d2c.tokenizer import build_world


@pytest.mark.parametrize("S", [1, 2, 7, 8, 16, 63, 64])
def test_cosine_counts_contract(S):
    counts = cosine_unmask_counts(S, 64)
    assert len(counts) == S and sum(counts) == 64 and min(counts) >= 1
    m = masked_counts(S, 64)
    assert m[0] == 64 and m[-1] == 0


def test_cosine_counts_examples():
    assert cosine_unmask_counts(1, 64) == [64]
    assert cosine_unmask_counts(64, 64) == [1] * 64
    # direct evaluation where the clamp is inactive
    n, S = 64, 8
    direct = [n] + [math.ceil(n * math.cos(math.pi / 2 * s / S)) for s in range(1, S)] + [0]
    assert masked_counts(S, n) == direct
    with pytest.raises(ConfigError):
        cosine_unmask_counts(65, 64)


def test_cosine_counts_full_length_is_formula_clamped():
    n = 64
    m = masked_counts(64, n)
    for s in range(1, 64):
        raw = math.ceil(n * math.cos(math.pi / 2 * s / 64))
        assert m[s] == min(m[s - 1] - 1, max(raw, 64 - s))


def test_linear_guidance_examples():
    assert linear_guidance(4.0, 0, 64) == 1.0
    assert linear_guidance(4.0, 64, 64) == 4.0
    assert linear_guidance(4.0, 32, 64) == 2.5
    with pytest.raises(ConfigError):
        linear_guidance(4.0, 65, 64)


def test_generation_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(steps=0).validate(64)
    with pytest.raises(ConfigError):
        GenerationConfig(cfg=-1.0).validate(64)


# ---------------------------------------------------------------- small models


@pytest.fixture(scope="module")
def models():
    s1 = Stage1Model(Stage1Config(K=5, C=3, h=2, w=3, layers=1, heads=2, width=8), seed=0)
    c2 = Stage2Config(K=5, C=3, h=2, w=3, d=2, width=8, heads=2, enc_layers=1, dec_layers=1, prefix=2, queries=3,
                      discrete_dim=8, cond_dim=4)
    s2 = Stage2Model(c2, seed=0, discrete_table=s1.params["tok_emb"].data)
    den = DenoiserMLP(DiffusionConfig(d=2, cond_dim=4, width=8), seed=0)
    return s1, s2, den, make_schedule(10)


def test_generate_deterministic_and_batch_free(models):
    s1, s2, den, sch = models
    conf = GenerationConfig(steps=3, cfg=2.0, stage1_cfg=1.5, seed=4)
    t1, l1 = generate(s1, s2, den, sch, [0, 1, 2, 0], conf)
    t2, l2 = generate(s1, s2, den, sch, [0, 1, 2, 0], conf)
    assert np.array_equal(t1, t2) and np.array_equal(l1, l2)
    assert t1.shape == (4, 6) and l1.shape == (4, 6, 2)
    t3, l3 = generate(s1, s2, den, sch, [2, 0], conf, sample_ids=[2, 3])
    assert np.array_equal(t3, t1[2:]) and np.allclose(l3, l1[2:], atol=1e-12)


def test_each_position_once(models):
    s1, s2, den, sch = models
    trace = []
    tokens = np.zeros((2, 6), dtype=int)
    generate_continuous(s2, den, sch, [0, 1], tokens, GenerationConfig(steps=4), trace=trace)
    pos = np.concatenate([t["positions"] for t in trace], axis=1)
    assert all(sorted(row) == list(range(6)) for row in pos)
    assert [t["revealed_before"] for t in trace] == [0] + list(np.cumsum(cosine_unmask_counts(4, 6))[:-1])
    assert trace[0]["omega"] == 1.0


def test_unconditional_branch_ignores_poison(models):
    _, s2, den, sch = models
    conf = GenerationConfig(steps=3, cfg=0.0, seed=1, linear_guidance=False)
    tokens = np.random.default_rng(0).integers(0, 5, (2, 6))
    a = generate_continuous(s2, den, sch, [0, 1], tokens, conf)
    b = generate_continuous(s2, den, sch, [2, 2], (tokens + 1) % 5, conf)
    assert np.array_equal(a, b)


def test_omega_one_linear_flag_irrelevant(models):
    _, s2, den, sch = models
    tokens = np.random.default_rng(0).integers(0, 5, (2, 6))
    a = generate_continuous(s2, den, sch, [0, 1], tokens, GenerationConfig(steps=3, linear_guidance=True))
    b = generate_continuous(s2, den, sch, [0, 1], tokens, GenerationConfig(steps=3, linear_guidance=False))
    assert np.array_equal(a, b)


def test_sample_many_workers(models):
    s1, s2, den, sch = models
    conf = GenerationConfig(steps=2, cfg=1.5, seed=2)
    classes = np.repeat(np.arange(3), 3)
    a = sample_many(s1, s2, den, sch, classes, conf, chunk=4, workers=1)
    b = sample_many(s1, s2, den, sch, classes, conf, chunk=4, workers=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


# ---------------------------------------------------------------- plug-in oracle


def test_oracle_stub_pipeline():
    """Exact conditional means as z plus the closed-form Gaussian denoiser reproduce the world."""
    world = build_world(3, C=2, K=6, h=2, w=2, d=2, rho=0.2, sigma=0.4)
    # fine schedule: ancestral sampling with few steps shrinks the variance of narrow targets
    sch = make_schedule(1000)

    class OracleStage2:
        config = SimpleNamespace(n=world.n, d=world.d, fusion="cross_attention")

        def forward_condition(self, classes, latents, plan, tokens, drop):
            classes = np.asarray(classes)
            mean = world.codebook[np.asarray(tokens)] + world.class_offsets[classes][:, None, :]
            return Tensor(mean)

    s2 = world.sigma ** 2

    def oracle_eps(x, t, z):
        ab = sch.alpha_bar[np.asarray(t) - 1][:, None]
        # x_t ~ N(sqrt(ab) z, ab s2 + 1 - ab); E[eps | x_t] follows from the joint Gaussian
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * z) / (ab * s2 + 1 - ab)

    N = 1500
    classes = np.arange(N) % world.C
    tokens = np.stack([world.templates[c] for c in classes])
    lat = generate_continuous(OracleStage2(), oracle_eps, sch, classes, tokens, GenerationConfig(steps=2, seed=5))
    mean = world.codebook[tokens] + world.class_offsets[classes][:, None, :]
    resid = lat - mean
    assert np.abs(resid.mean(axis=0)).max() < 4 * world.sigma / math.sqrt(N)
    assert abs(resid.std() - world.sigma) < 0.01
