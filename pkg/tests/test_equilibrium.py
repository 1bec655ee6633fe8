import math

import numpy as np
from hypothesis import given, settings, strategies as st

from stability_lab import projective as pj
from stability_lab.equilibrium import (birkhoff_lyapunov, escape_rate, fiber_residual, green,
                                       push_forward, sample_equilibrium)
from stability_lab.family import power_family, quadratic_family
from stability_lab.lyapunov import green_formula_lyapunov
from stability_lab.stats import ks_against_cdf, ks_distance, substream


def test_green_power_map():
    f = power_family(2)
    assert abs(green(f, 0.0, 2.0).value - math.log(2)) < 1e-12
    assert abs(green(f, 0.0, np.exp(0.7j)).value) < 1e-12


def test_green_depth_stability():
    # escape-rate oracle at two depths
    f = quadratic_family()
    g50 = green(f, 1.0, 0.0, depth=50).value
    g60 = green(f, 1.0, 0.0, depth=60).value
    assert g60 > 0
    assert abs(g60 - g50) < 1e-9


finite = st.floats(-2, 2, allow_nan=False)


@settings(max_examples=100)
@given(st.builds(complex, finite, finite), st.builds(complex, finite, finite))
def test_green_functional_equation(lam, z):
    f = quadratic_family()
    x = pj.lift_affine(z)
    g0, b0 = escape_rate(f, lam, x, 60)
    g1, b1 = escape_rate(f, lam, f.step(lam, x), 60)
    assert g0 >= -1e-12
    assert abs(g1 - 2 * g0) <= 1e-8 + b0 + b1


def test_square_samples_on_circle_and_uniform():
    s = sample_equilibrium(power_family(2), 0.0, 4096, depth=30, seed=3)
    z = s.affine()
    assert np.max(np.abs(np.abs(z) - 1)) < 1e-6
    u = (np.angle(z) + np.pi) / (2 * np.pi)
    assert ks_against_cdf(u, lambda t: t) < 0.05
    assert np.isclose(s.weights.sum(), 1.0)


def test_chebyshev_arcsine_law():
    s = sample_equilibrium(quadratic_family(), -2.0, 4096, depth=30, seed=4)
    z = s.affine()
    assert np.max(np.abs(z.imag)) < 1e-6 and np.max(np.abs(z.real)) <= 2 + 1e-9
    cdf = lambda x: np.arccos(-np.clip(x, -2, 2) / 2) / np.pi
    assert ks_against_cdf(z.real, cdf) < 0.05


def test_fiber_consistency():
    s = sample_equilibrium(quadratic_family(), 0.25j, 512, depth=30, seed=5)
    assert np.max(fiber_residual(quadratic_family(), s)) < 1e-6


def test_pullback_invariance():
    f = quadratic_family()
    lam = -0.12 + 0.75j
    a = push_forward(f, sample_equilibrium(f, lam, 4096, seed=6))
    b = sample_equilibrium(f, lam, 4096, seed=7)
    za, zb = a.affine(), b.affine()
    assert ks_distance(za.real, zb.real) < 0.08
    assert ks_distance(za.imag, zb.imag) < 0.08


def test_sampling_is_seeded():
    f = quadratic_family()
    a = sample_equilibrium(f, 0.3j, 64, seed=11)
    b = sample_equilibrium(f, 0.3j, 64, seed=11)
    assert np.array_equal(a.coords, b.coords)


def test_birkhoff_power_maps():
    for d in (2, 3):
        f = power_family(d)
        s = sample_equilibrium(f, 0.0, 256, seed=1)
        est = birkhoff_lyapunov(f, 0.0, s, n_iter=50)
        assert abs(est.value - math.log(d)) < 1e-6


def test_birkhoff_basilica():
    f = quadratic_family()
    s = sample_equilibrium(f, -1.0, 4096, seed=2)
    est = birkhoff_lyapunov(f, -1.0, s, n_iter=200)
    assert abs(est.value - math.log(2)) < 3 * est.stderr + 1e-12


def test_birkhoff_matches_green_formula_on_random_parameters():
    f = quadratic_family()
    rng = substream(21, 0)
    lams = 2.2 * (rng.random(20) - 0.6) + 2.2j * (rng.random(20) - 0.5)
    for lam in lams:
        s = sample_equilibrium(f, lam, 1024, seed=9)
        est = birkhoff_lyapunov(f, lam, s, n_iter=100)
        ref = green_formula_lyapunov(f, lam)
        assert abs(est.value - ref) <= max(1e-2, 3 * est.stderr), lam
