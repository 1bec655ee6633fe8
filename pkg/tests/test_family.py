import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stability_lab import projective as pj
from stability_lab.family import (CollisionError, FamilySpec, ParamGrid, critical_marking,
                                  cubic_family, derivative, evaluate, fs_jacobian,
                                  power_family, quadratic_family, skew_product_family)

finite = st.floats(-3, 3, allow_nan=False)
cplx = st.builds(complex, finite, finite)


def test_evaluate_examples():
    f = quadratic_family()
    assert evaluate(f, 0.0, pj.ProjPoint([2, 1])) == pj.ProjPoint([4, 1])
    assert evaluate(f, 0.0, pj.ProjPoint([1, 0])) == pj.ProjPoint([1, 0])
    assert evaluate(f, 1j, pj.ProjPoint([0, 1])) == pj.ProjPoint([1j, 1])


def test_evaluate_long_orbit_stays_finite():
    f = quadratic_family()
    x = np.array([3.0, 1.0], dtype=complex)
    for _ in range(2000):
        x = f.step(0.1, x)
    assert np.all(np.isfinite(x))


def test_unit_circle_jacobian_of_square():
    f = power_family(2)
    assert np.isclose(fs_jacobian(f, 0.0, np.array([1.0, 1.0])), 2.0)
    assert np.isclose(abs(derivative(f, 0.0, 1.0).jac_z), 2.0)


def test_critical_point_jacobian_vanishes():
    assert abs(derivative(quadratic_family(), 0.3, 0.0).jac_z) < 1e-15


def test_lambda_derivative_against_finite_difference():
    f = quadratic_family()
    c, h = 0.4 - 0.3j, 1e-6
    got = derivative(f, c, 0.0).jac_lam
    img = lambda lam: complex(evaluate(f, lam, 0.0).affine())
    fd = (img(c + h) - img(c - h)) / (2 * h)
    assert np.isclose(abs(got), abs(fd) / (1 + abs(c) ** 2), rtol=1e-6)
    assert np.isclose(abs(got), 1 / (1 + abs(c) ** 2), rtol=1e-9)


@settings(max_examples=100)
@given(cplx, cplx, cplx, cplx)
def test_homogeneity(lam, a, b, t):
    if abs(t) < 1e-2 or max(abs(a), abs(b)) < 1e-2:
        return
    for f in (quadratic_family(), cubic_family()):
        assert f.homogeneity_error(lam, np.array([a, b]), t) < 1e-10


def test_homogeneity_k2():
    f = skew_product_family()
    rng = np.random.default_rng(1)
    x = rng.normal(size=3) + 1j * rng.normal(size=3)
    assert f.homogeneity_error(0.05, x, 0.7 - 1.1j) < 1e-12


@settings(max_examples=40)
@given(cplx, cplx)
def test_chart_independence(lam, z):
    f = quadratic_family()
    if abs(z) < 0.2 or abs(z) > 5 or abs(z * z + lam) < 0.2:
        return
    a = derivative(f, lam, z, source_chart=1, target_chart=1).jac_z
    b = derivative(f, lam, z, source_chart=0, target_chart=0).jac_z
    assert abs(abs(a) - abs(b)) < 1e-8 * max(1.0, abs(a))
    assert np.isclose(abs(a), fs_jacobian(f, lam, np.array([z, 1.0])), rtol=1e-8)


def test_nondegeneracy_positive():
    f = quadratic_family()
    for lam in (0.0, -2.0, 1 + 1j):
        assert f.nondegeneracy(lam) > 1e-6


def test_quadratic_markings_constant():
    grid = ParamGrid(-0.5, 0.5, -0.5, 0.5, 6, 6)
    tracks = critical_marking(quadratic_family(), grid)
    aff = sorted([pj.affine(pj.normalize(t.values[0])) for t in tracks], key=abs)
    assert abs(aff[0]) < 1e-12 and np.isinf(aff[1])
    for t in tracks:
        assert t.max_step() < 1e-12


def test_cubic_markings_closed_form():
    # critical points of z^3 + c z are +-sqrt(-c/3), +-1 at c = -3
    grid = ParamGrid(-3.2, -2.8, -0.2, 0.2, 5, 5)
    tracks = critical_marking(cubic_family(), grid)
    i = grid.index_of(-3.0)
    lam = grid.flat()[i]
    fin = [complex(pj.affine(pj.normalize(t.values[i]))) for t in tracks]
    fin = [v for v in fin if np.isfinite(v)]
    ref = np.sqrt(-lam / 3)
    assert len(fin) == 2
    for v in fin:
        assert min(abs(v - ref), abs(v + ref)) < 1e-10


def test_marking_completeness():
    f = cubic_family()
    grid = ParamGrid(-3.2, -2.8, -0.2, 0.2, 4, 4)
    tracks = critical_marking(f, grid)
    for i, lam in enumerate(grid.flat()):
        fin = [complex(pj.affine(pj.normalize(t.values[i]))) for t in tracks]
        fin = [v for v in fin if np.isfinite(v)]
        # derivative numerator 3 z^2 + c
        assert np.allclose(3 * np.poly(fin), [3, 0, lam], atol=1e-9)


def test_cubic_collision_at_zero():
    with pytest.raises(CollisionError):
        critical_marking(cubic_family(), ParamGrid(-0.2, 0.2, -0.2, 0.2, 5, 5))


def test_json_roundtrip():
    f = cubic_family()
    g = FamilySpec.from_json(f.to_json())
    x = np.array([0.3 + 0.1j, 1.0])
    assert np.allclose(f.lift(0.5, x), g.lift(0.5, x))
