import csv
import math

import numpy as np
import pytest

from isacopt.channel import (channels_to_csv, draw_channels, path_loss,
                             rician_channel, steering_derivative,
                             steering_vector)
from isacopt.scene import SystemConfig, generate_scenario


def test_steering_vector_examples():
    assert np.allclose(steering_vector(np.pi / 2, 4, 0.5), np.ones(4))
    assert np.allclose(steering_vector(0.0, 2, 0.5), [1.0, -1.0])
    assert np.allclose(steering_vector(np.pi / 3, 3, 0.5), [1.0, 1j, -1.0])


def test_steering_vector_unimodular_and_norm():
    for theta in np.linspace(0, np.pi, 17):
        a = steering_vector(theta, 16, 0.5)
        assert np.allclose(np.abs(a), 1.0)
        assert np.vdot(a, a).real == pytest.approx(16.0)
        assert abs(np.vdot(a, a).imag) < 1e-12


def test_steering_vector_batched_shape():
    grid = np.linspace(0, np.pi, 11)
    A = steering_vector(grid, 6, 0.5)
    assert A.shape == (11, 6)
    assert np.allclose(A[3], steering_vector(grid[3], 6, 0.5))


def test_approximate_orthogonality_large_m():
    # Widely separated angles decorrelate once the array is large. At
    # half-wavelength spacing the correlation is periodic in cos(theta)
    # with period 2, so separation is measured on that torus (mirrored
    # endfire angles are genuinely indistinguishable to the array).
    m = 64
    thetas = np.linspace(0.05, np.pi - 0.05, 25)
    for t1 in thetas:
        for t2 in thetas:
            delta = abs(math.cos(t1) - math.cos(t2))
            if min(delta, 2.0 - delta) < 0.2:
                continue
            a1 = steering_vector(t1, m, 0.5)
            a2 = steering_vector(t2, m, 0.5)
            assert abs(np.vdot(a1, a2)) / m < 0.2


def test_steering_derivative_examples():
    assert np.allclose(steering_derivative(0.0, 5, 0.5), np.zeros(5))
    for theta in (0.3, 1.2, 2.9):
        assert steering_derivative(theta, 6, 0.5)[0] == 0
    d = steering_derivative(np.pi / 2, 2, 0.5)
    assert np.allclose(d, [0.0, -1j * np.pi])


def test_steering_derivative_matches_finite_differences():
    m, step = 12, 1e-6
    worst = 0.0
    for theta in np.linspace(0.05, np.pi - 0.05, 9):
        fd = (steering_vector(theta + step, m, 0.5)
              - steering_vector(theta - step, m, 0.5)) / (2 * step)
        an = steering_derivative(theta, m, 0.5)
        worst = max(worst, np.abs(fd - an).max() / np.abs(an).max())
    assert worst < 1e-6


def test_path_loss_values():
    assert path_loss(1.0, 2.4, -30.0) == pytest.approx(1e-3, rel=1e-12)
    assert path_loss(100.0, 2.0, -30.0) == pytest.approx(1e-7, rel=1e-12)
    for vs in (1.0, 2.4, 3.5):
        assert path_loss(1.0, vs, -30.0) == pytest.approx(1e-3, rel=1e-12)
    with pytest.raises(ValueError):
        path_loss(0.0, 2.0, -30.0)
    with pytest.raises(ValueError):
        path_loss(-3.0, 2.0, -30.0)


def test_rician_los_limit():
    rng = np.random.default_rng(0)
    m, beta, theta = 8, 0.2, 1.0
    h = rician_channel(beta, 1e6, theta, m, 0.5, rng)
    los = beta * steering_vector(theta, m, 0.5) / math.sqrt(m)
    assert np.linalg.norm(h - los) / np.linalg.norm(h) < 1e-2


def test_rician_mean_energy_matches_moments():
    # E||h||^2 = beta^2 (kappa/(kappa+1) + M/(kappa+1)); kappa=2, M=8.
    rng = np.random.default_rng(2024)
    m, beta, kappa = 8, 0.7, 2.0
    n = 100_000
    acc = 0.0
    for _ in range(n):
        h = rician_channel(beta, kappa, 0.9, m, 0.5, rng)
        acc += np.vdot(h, h).real
    expected = beta ** 2 * (2.0 / 3.0 + m / 3.0)
    assert acc / n == pytest.approx(expected, rel=0.01)


def test_draw_channels_deterministic_per_stream():
    cfg = SystemConfig(K=2, N=3, M=4, seed=5, area_size=60.0,
                       bs_spacing_min=10.0, bs_spacing_max=50.0,
                       target_dist_min=3.0, target_dist_max=8.0)
    scn = generate_scenario(cfg)
    a = draw_channels(scn, cfg, 5)
    b = draw_channels(scn, cfg, np.random.SeedSequence(5))
    assert np.array_equal(a.h, b.h) and np.array_equal(a.g, b.g)
    c = draw_channels(scn, cfg, 6)
    assert not np.array_equal(a.h, c.h)


def test_sensing_channel_is_scaled_steering():
    cfg = SystemConfig(K=1, N=1, M=6, seed=3, area_size=60.0,
                       bs_spacing_min=10.0, bs_spacing_max=50.0,
                       target_dist_min=3.0, target_dist_max=8.0)
    scn = generate_scenario(cfg)
    ch = draw_channels(scn, cfg, 3)
    for q in range(2):
        expected = (ch.beta_t[0, q] / math.sqrt(6)
                    * steering_vector(scn.phi[0, q], 6, 0.5))
        assert np.allclose(ch.g[0, q], expected)


def test_channel_csv_dump(tmp_path):
    cfg = SystemConfig(K=1, N=2, M=3, seed=1, area_size=60.0,
                       bs_spacing_min=10.0, bs_spacing_max=50.0,
                       target_dist_min=3.0, target_dist_max=8.0)
    scn = generate_scenario(cfg)
    ch = draw_channels(scn, cfg, 1)
    path = tmp_path / "ch.csv"
    channels_to_csv(ch, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 * 2 + 1 * 2  # h links + g links
    row = next(r for r in rows if r["kind"] == "h" and r["k"] == "0" and r["i"] == "1")
    rebuilt = np.array([float(row[f"re_{m}"]) + 1j * float(row[f"im_{m}"])
                        for m in range(3)])
    assert np.array_equal(rebuilt, ch.h[0, 1])
