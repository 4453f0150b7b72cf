import math
from dataclasses import replace

import numpy as np
import pytest

from d2c import rng as rngmod
from d2c import tokenizer as T
from d2c.errors import ConfigError, FormatError, InputError


@pytest.fixture(scope="module")
def world():
    return T.build_world(0)


def test_world_is_deterministic():
    a, b = T.build_world(7), T.build_world(7)
    for f in ("codebook", "templates", "class_offsets"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.codebook, T.build_world(8).codebook)


def test_degenerate_world():
    w = T.build_world(0, C=1, K=2, h=1, w=1, d=1)
    assert w.templates.shape == (1, 1)
    assert 0 <= w.templates[0, 0] < 2


@pytest.mark.parametrize("kwargs", [dict(C=0), dict(K=1), dict(rho=1.0), dict(rho=-0.1), dict(sigma=0.0)])
def test_world_rejects_bad_ranges(kwargs):
    with pytest.raises(ConfigError):
        T.build_world(0, **kwargs)


def test_templates_distinct(world):
    # union bound over class pairs of sharing all n cells
    bound = math.comb(world.C, 2) * world.K ** (-world.n)
    assert bound < 1e-10
    assert len({tuple(t) for t in world.templates}) == world.C


def test_grid_round_trips(world):
    q, z = T.sample_pair(world, 1, np.random.default_rng(0))
    assert np.array_equal(T.TokenGrid.from_2d(q.as_2d()).indices, q.indices)
    assert np.array_equal(T.LatentGrid.from_3d(z.as_3d()).values, z.values)
    assert (q.h, q.w) == (z.h, z.w)


def test_no_corruption_and_no_noise(world):
    clean = replace(world, rho=0.0)
    q, _ = T.sample_pair(clean, 2, np.random.default_rng(3))
    assert np.array_equal(q.indices, world.templates[2])
    quiet = replace(world, sigma=1e-300)
    q, z = T.sample_pair(quiet, 0, np.random.default_rng(4))
    assert np.array_equal(z.values, world.codebook[q.indices] + world.class_offsets[0])


def test_sample_pair_rejects_class(world):
    with pytest.raises(InputError):
        T.sample_pair(world, world.C, np.random.default_rng(0))


def test_empirical_mean_matches_oracle(world):
    draws = 10_000
    g = np.random.default_rng(11)
    zs = np.stack([T.sample_pair(world, 3, g)[1].values for _ in range(draws)])
    mu, cov = T.oracle_class_stats(world, 3)
    # standard error from the exact per-coordinate variance, 4 sigma tolerance
    se = np.sqrt(np.diagonal(cov, axis1=1, axis2=2) / draws)
    assert np.all(np.abs(zs.mean(0) - mu) < 4 * se)


def test_oracle_pure_gaussian_case(world):
    w = replace(world, rho=0.0, sigma=1.0)
    mu, cov = T.oracle_class_stats(w, 1)
    assert np.allclose(mu, world.codebook[world.templates[1]] + world.class_offsets[1], atol=1e-15)
    assert np.allclose(cov, np.eye(world.d)[None].repeat(world.n, 0), atol=1e-15)


def test_oracle_single_codeword():
    base = T.build_world(0, K=2, h=2, w=2, d=3)
    w = replace(base, K=1, codebook=base.codebook[:1], templates=np.zeros_like(base.templates), rho=0.5)
    _, cov = T.oracle_class_stats(w, 0)
    assert np.allclose(cov, w.sigma**2 * np.eye(3)[None], atol=1e-15)


def test_oracle_covariance_monte_carlo():
    w = T.build_world(5, C=2, K=6, h=2, w=2, d=3, rho=0.4, sigma=0.3)
    g = np.random.default_rng(2)
    zs = np.stack([T.sample_pair(w, 0, g)[1].values for _ in range(50_000)])
    _, cov = T.oracle_class_stats(w, 0)
    emp = np.einsum("sni,snj->nij", zs - zs.mean(0), zs - zs.mean(0)) / (len(zs) - 1)
    # the mixture term is material here, so the check is not just sigma^2 I
    assert np.abs(cov - w.sigma**2 * np.eye(3)).max() > 0.1
    scale = np.sqrt(np.einsum("nii,njj->nij", cov, cov))
    assert np.all(np.abs(emp - cov) <= 0.05 * scale)


def test_template_entropy():
    assert T.template_entropy(0.0, 32) == 0.0
    assert abs(T.template_entropy(1.0, 32) - math.log(32)) < 1e-15
    # brute-force summation over the 32 outcomes
    p = np.full(32, 0.1 / 32)
    p[0] += 0.9
    direct = -sum(x * math.log(x) for x in p)
    assert abs(T.template_entropy(0.1, 32) - direct) < 1e-14
    assert abs(T.oracle_template_entropy(T.build_world(0)) - 0.6508293930922319) < 1e-12


def test_expected_match_rate():
    assert abs(T.expected_match_rate(0.1, 32) - (0.9 + 0.1 / 32)) < 1e-15


def test_dataset_is_pure_function_of_index(world):
    c1, q1, z1 = T.generate_dataset(world, 6, seed=3)
    c2, q2, z2 = T.generate_dataset(world, 3, seed=3, start=3)
    assert np.array_equal(c1[3:], c2) and np.array_equal(q1[3:], q2) and np.array_equal(z1[3:], z2)
    assert np.array_equal(c1, np.arange(6) % world.C)


def test_record_file_round_trip(tmp_path, world):
    classes, tokens, latents = T.generate_dataset(world, 5, seed=1)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    T.write_records(p1, world.C, world.K, world.h, world.w, world.d, classes, tokens, latents)
    T.write_records(p2, world.C, world.K, world.h, world.w, world.d, classes, tokens, latents)
    raw = p1.read_bytes()
    assert raw == p2.read_bytes()
    assert raw[:4] == b"D2CD"
    n, d = world.n, world.d
    assert len(raw) == 32 + 5 * (4 + 4 * n + 4 * n * d)
    back = T.read_records(p1)
    assert np.array_equal(back["classes"], classes)
    assert np.array_equal(back["tokens"], tokens)
    assert np.array_equal(back["latents"], latents.astype(np.float32))


def test_record_file_corruption(tmp_path, world):
    classes, tokens, latents = T.generate_dataset(world, 2, seed=1)
    p = tmp_path / "a.bin"
    T.write_records(p, world.C, world.K, world.h, world.w, world.d, classes, tokens, latents)
    raw = p.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-3])
    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    for name in ("short.bin", "magic.bin"):
        with pytest.raises(FormatError):
            T.read_records(tmp_path / name)


def test_rng_streams_are_keyed():
    a = rngmod.stream(1, "token", 3, 4).random(4)
    assert np.array_equal(a, rngmod.stream(1, "token", 3, 4).random(4))
    assert not np.array_equal(a, rngmod.stream(1, "token", 4, 3).random(4))
    assert not np.array_equal(a, rngmod.stream(1, "order", 3, 4).random(4))
