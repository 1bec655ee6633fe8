import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from stability_lab import projective as pj
from stability_lab.family import (MotionTrack, ParamGrid, critical_marking, power_family,
                                  quadratic_family, skew_product_family)
from stability_lab.postcritical import (Window, convergence_map, graph_mass, growth_fit,
                                        mass_growth_rate, montecarlo_mass_k2, partial_sums,
                                        postcritical_track, ramification_batch,
                                        ramification_series, series_verdict)

GRID = ParamGrid(-0.5, 0.5, -0.5, 0.5, 8, 8)


def _track(fn, dfn):
    def ev(lam):
        lam = np.asarray(lam, dtype=complex)
        z = fn(lam)
        x = np.stack([z, np.ones_like(z)], axis=-1)
        xp = np.stack([dfn(lam), np.zeros_like(z)], axis=-1)
        return x, xp
    v, dv = ev(GRID.flat())
    return MotionTrack(GRID, v, "postcritical", dv, ev)


def _polar_oracle(speed2, R):
    # area + int speed^2 dA over the disc |c| < R by scipy quadrature
    f = lambda r, t: r * (1.0 + speed2(r * np.exp(1j * t)))
    val, err = integrate.dblquad(f, 0, 2 * np.pi, 0, R, epsabs=1e-12, epsrel=1e-12)
    return val


def test_constant_track_gives_area():
    t = _track(lambda l: np.full(l.shape, 0.3 + 0.1j), lambda l: np.zeros(l.shape, complex))
    m = graph_mass(t, Window.disc(0, 0.5))
    assert abs(m.value - math.pi * 0.25) < 1e-12
    m = graph_mass(t, Window.rect(-0.5, 0.5, -0.25, 0.25))
    assert abs(m.value - 0.5) < 1e-12


def test_identity_track_closed_form():
    t = _track(lambda l: l, lambda l: np.ones(l.shape, complex))
    # pi r^2 + pi (1 - 1 / (1 + r^2)) at r = 0.5
    exact = math.pi / 4 + math.pi * (1 - 1 / 1.25)
    m = graph_mass(t, Window.disc(0, 0.5), n_base=64)
    assert abs(m.value - exact) < 1e-4 * exact
    assert abs(exact - 1.413717) < 1e-6


def test_first_postcritical_track_against_quadrature():
    t = _track(lambda l: l * l + l, lambda l: 2 * l + 1)
    oracle = _polar_oracle(lambda c: abs(2 * c + 1) ** 2 / (1 + abs(c * c + c) ** 2) ** 2, 0.5)
    got = graph_mass(t, Window.disc(0, 0.5), n_base=64).value
    assert abs(got - oracle) < 1e-4 * oracle
    fd = graph_mass(t, Window.disc(0, 0.5), n_base=64, derivative="fd").value
    assert abs(fd - oracle) < 1e-4 * oracle


def test_postcritical_tracks_first_images():
    f = quadratic_family()
    mk = [m for m in critical_marking(f, GRID) if np.isfinite(pj.affine(m.values[0]))][0]
    lam = GRID.flat()
    assert np.allclose(pj.affine(pj.normalize(postcritical_track(f, mk, 1).values)), lam)
    assert np.allclose(pj.affine(pj.normalize(postcritical_track(f, mk, 2).values)),
                       lam * lam + lam)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 0.45), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_restriction_monotonicity(r, x, y):
    t = _track(lambda l: l * l + l, lambda l: 2 * l + 1)
    big = graph_mass(t, Window.disc(0, 0.5)).value
    small = graph_mass(t, Window.disc(complex(x, y), r)).value
    assert small <= big + 1e-6


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30))
def test_partial_sums_additive(per):
    ps = partial_sums(np.array(per))
    assert np.all(np.diff(ps) >= 0)
    for n in range(len(per)):
        assert ps[n] == math.fsum(per[: n + 1])


def test_series_verdict_rules():
    geo = 0.5 ** np.arange(20)
    assert series_verdict(geo)[0] == "converged"
    assert series_verdict(np.ones(20))[0] == "diverging"
    unres = np.zeros(20, dtype=bool)
    unres[15] = True
    assert series_verdict(geo, unres)[0] == "inconclusive"


def test_power_family_series_zero():
    f = power_family(2)
    g = ParamGrid(-0.1, 0.1, -0.1, 0.1, 4, 4)
    s = ramification_series(f, critical_marking(f, g), Window.disc(0, 0.05, (0.5, 0.2)), 20)
    assert np.all(s.per_n == 0)
    assert s.verdict == "converged"


def test_cardioid_centre_window_converges():
    f = quadratic_family()
    g = ParamGrid(-0.1, 0.1, -0.1, 0.1, 8, 8)
    s = ramification_series(f, critical_marking(f, g), Window.disc(0, 0.05, (0.5, 0.2)), 30)
    assert s.verdict == "converged"
    assert np.all(s.per_n >= 0)
    assert s.per_n[-1] <= s.per_n[:5].max()


def test_power_growth_is_flat():
    f = power_family(2)
    U = Window.disc(0.0, 0.1)
    fit = mass_growth_rate(f, U, 10)
    assert np.allclose(fit.masses, 2 * U.area, rtol=1e-12)
    assert abs(fit.rate) < 1e-12 and fit.stable


def test_cardioid_growth_bounded():
    f = quadratic_family()
    fit = mass_growth_rate(f, Window.disc(-0.1, 0.1), 30, n_base=8)
    assert fit.stable and fit.rate < 0.01
    assert np.max(fit.masses) < 10


def test_growth_at_minus_two():
    f = quadratic_family()
    fit = mass_growth_rate(f, Window.disc(-2.0, 0.1), 12, n_base=8)
    assert fit.rate >= 0.2
    assert not fit.stable


def test_growth_fit_recovers_rate():
    n = np.arange(20)
    fit = growth_fit(3.0 * np.exp(0.4 * n))
    assert abs(fit.rate - 0.4) < 1e-12 and not fit.stable


def test_product_structure_stable_window():
    f = quadratic_family()
    g = ParamGrid(-0.2, 0.2, -0.2, 0.2, 8, 8)
    balls = [(0.8, 0.3), (-0.9 + 0.4j, 0.3), (1.5j, 0.3), (float("inf"), 0.2)]
    ser = ramification_batch(f, critical_marking(f, g), [Window.disc(0, 0.1, b) for b in balls],
                             14, degree_fallback=False)
    assert [s.verdict for s in ser] == ["converged"] * len(balls)


def test_straddling_window_not_converged():
    f = quadratic_family()
    g = ParamGrid(-2.1, -1.9, -0.1, 0.1, 8, 8)
    ser = ramification_batch(f, critical_marking(f, g), [Window.disc(-2, 0.05, (0.6, 0.3))],
                             14, degree_fallback=False)
    assert ser[0].verdict != "converged"


def test_nested_windows_consistent():
    f = quadratic_family()
    g = ParamGrid(-0.6, 0.2, -0.4, 0.4, 4, 4)
    cmap = convergence_map(f, g, [(0.9, 0.3)], 12)
    assert cmap.nested_violations() == []


def test_skew_product_degenerate_parameter():
    # at lambda = 0 the map is the product (z^2, w^2)
    f = skew_product_family()
    x = np.array([0.3 + 0.2j, -0.7j, 1.0])
    assert np.allclose(f.lift(0.0, x), x**2)


def test_montecarlo_seeded():
    f = skew_product_family()
    U = Window.disc(0, 0.1)
    a = montecarlo_mass_k2(f, 2, U, 2000, seed=4)
    b = montecarlo_mass_k2(f, 2, U, 2000, seed=4)
    assert a == b
    assert a.estimate > 0 and a.stderr > 0
