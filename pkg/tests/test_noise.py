import math

import numpy as np
import pytest

from noise import (
    NoiseError,
    StepNoise,
    coarsen,
    coarsen_ladder,
    ladder_arrays,
    moment_check,
    ou_noise,
    ou_noise_ladder,
    sample_fine,
)


def _step(eta, zeta, h):
    return StepNoise(np.array([[eta, 0.0, 0.0]]), np.array([[zeta, 0.0, 0.0]]), h)


def test_coarsen_worked_example():
    out = coarsen(_step(1.0, 0.0, 0.01), _step(0.0, 0.0, 0.01))
    assert out.dt == pytest.approx(0.02)
    assert out.eta[0, 0] == pytest.approx(1.0 / math.sqrt(2.0), abs=1e-12)
    assert out.zeta[0, 0] == pytest.approx(math.sqrt(3.0) / (2.0 * math.sqrt(2.0)), abs=1e-12)


def test_coarsen_zero_noise():
    out = coarsen(_step(0.0, 0.0, 0.5), _step(0.0, 0.0, 0.5))
    assert not out.eta.any() and not out.zeta.any()


def test_coarsen_rejects_mismatched_steps():
    with pytest.raises(NoiseError):
        coarsen(_step(1.0, 0.0, 0.01), _step(1.0, 0.0, 0.02))


def test_coarsen_preserves_increment_and_integral():
    rng = np.random.default_rng(2)
    h = 0.03
    a = StepNoise(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), h)
    b = StepNoise(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)), h)
    c = coarsen(a, b)
    np.testing.assert_allclose(c.increment, a.increment + b.increment, atol=1e-12)
    np.testing.assert_allclose(c.integral, a.integral + b.integral + h * a.increment, atol=1e-12)


def test_sample_fine_is_reproducible_and_extendable():
    full = sample_fine(11, 8, 3, h_fine=0.1)
    again = sample_fine(11, 8, 3, h_fine=0.1)
    head = sample_fine(11, 4, 3, h_fine=0.1)
    tail = sample_fine(11, 4, 3, h_fine=0.1, start=4)
    np.testing.assert_array_equal(full.eta, again.eta)
    np.testing.assert_array_equal(full.eta, np.concatenate([head.eta, tail.eta]))
    np.testing.assert_array_equal(full.zeta, np.concatenate([head.zeta, tail.zeta]))
    assert not np.array_equal(full.eta, sample_fine(12, 8, 3, h_fine=0.1).eta)


def test_sample_fine_is_read_only():
    path = sample_fine(1, 2, 2)
    with pytest.raises(ValueError):
        path.eta[0, 0, 0] = 1.0


def test_ladder_level_zero_is_the_fine_path():
    path = sample_fine(3, 8, 2, h_fine=0.25)
    steps = coarsen_ladder(path, 0)
    assert len(steps) == 8
    np.testing.assert_array_equal(steps[3].eta, path.eta[3])
    assert steps[0].dt == 0.25


def test_ladder_level_two_is_repeated_pairwise_coarsening():
    path = sample_fine(4, 8, 2, h_fine=0.25)
    fine = coarsen_ladder(path, 0)
    level1 = [coarsen(fine[2 * k], fine[2 * k + 1]) for k in range(4)]
    level2 = [coarsen(level1[2 * k], level1[2 * k + 1]) for k in range(2)]
    ladder = coarsen_ladder(path, 2)
    assert len(ladder) == 2
    for mine, expected in zip(ladder, level2):
        assert mine.dt == pytest.approx(1.0)
        np.testing.assert_allclose(mine.eta, expected.eta, atol=1e-12)
        np.testing.assert_allclose(mine.zeta, expected.zeta, atol=1e-12)


def test_ladder_conserves_brownian_increment():
    h = 1e-3
    path = sample_fine(5, 32, 4, h_fine=h)
    fine_sum = math.sqrt(h) * path.eta.sum(axis=0)
    for level in range(1, 6):
        eta, _, dt = ladder_arrays(path, level)
        np.testing.assert_allclose(math.sqrt(dt) * eta.sum(axis=0), fine_sum, atol=1e-12)


def test_ladder_requires_divisible_length():
    path = sample_fine(6, 6, 1)
    with pytest.raises(NoiseError):
        coarsen_ladder(path, 2)
    with pytest.raises(NoiseError):
        ou_noise_ladder(path, 2, 1.0)


def test_moments_at_every_ladder_level():
    # 16 chunks of 16 fine steps; level k pools the first 2^k chunks, 1e6 samples each
    dim = 20834
    pooled = {level: ([], []) for level in range(5)}
    for chunk in range(16):
        path = sample_fine(8, 16, dim, h_fine=1e-3, start=16 * chunk)
        for level in range(5):
            if chunk < (1 << level):
                eta, zeta, _ = ladder_arrays(path, level)
                pooled[level][0].append(eta)
                pooled[level][1].append(zeta)
    for level, (etas, zetas) in pooled.items():
        eta, zeta = np.concatenate(etas), np.concatenate(zetas)
        assert eta.size >= 1_000_000
        for name, (estimate, stderr, expected) in moment_check(eta, zeta).items():
            assert abs(estimate - expected) < 5.0 * stderr, (level, name)


def test_ou_noise_single_fine_step_is_eta():
    path = sample_fine(9, 4, 3, h_fine=0.1)
    xi = ou_noise(path, 0.2, 0.1, gamma=1.0)
    np.testing.assert_array_equal(xi, path.eta[2])


def test_ou_noise_without_friction_is_the_coarse_increment():
    path = sample_fine(10, 16, 3, h_fine=0.1)
    xi = ou_noise(path, 0.0, 1.6, gamma=0.0)
    eta, _, _ = ladder_arrays(path, 4)
    np.testing.assert_allclose(xi, eta[0], atol=1e-12)


def test_ou_noise_ladder_matches_windows():
    path = sample_fine(13, 16, 2, h_fine=0.05)
    xi = ou_noise_ladder(path, 2, gamma=1.5)
    for k in range(4):
        np.testing.assert_allclose(xi[k], ou_noise(path, 0.2 * k, 0.2, gamma=1.5), atol=1e-12)


def test_ou_noise_rejects_misaligned_window():
    path = sample_fine(14, 8, 1, h_fine=0.1)
    with pytest.raises(NoiseError):
        ou_noise(path, 0.05, 0.2, gamma=1.0)
    with pytest.raises(NoiseError):
        ou_noise(path, 0.0, 1.6, gamma=1.0)


def test_ou_noise_has_unit_variance():
    path = sample_fine(15, 16 * 64, 500, h_fine=0.1)
    xi = ou_noise_ladder(path, 4, gamma=1.0).reshape(-1)
    variance = np.mean(xi * xi)
    stderr = np.std(xi * xi, ddof=1) / math.sqrt(xi.size)
    assert abs(variance - 1.0) < 5.0 * stderr


def test_different_seeds_give_different_paths():
    a = sample_fine(21, 16, 100)
    b = sample_fine(22, 16, 100)
    assert np.mean(a.eta != b.eta) >= 0.99
    assert np.mean(a.zeta != b.zeta) >= 0.99
