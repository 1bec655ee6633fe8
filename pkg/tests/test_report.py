import numpy as np
from scipy import ndimage

from stability_lab.family import ParamGrid, quadratic_family
from stability_lab.lyapunov import lyapunov_raster
from stability_lab.report import (agreement, boundary_distance, escape_time, oracle_boundary,
                                  raster_vs_oracle)


def _brute_mask(grid, n=1000):
    c = grid.lam()
    z = np.zeros_like(c)
    alive = np.ones(c.shape, dtype=bool)
    for _ in range(n):
        z = np.where(alive, z * z + c, z)
        alive &= np.abs(z) <= 2
    return alive


def test_escape_time_matches_brute_force():
    g = ParamGrid(-2.5, 1.5, -2, 2, 64, 64)
    mask, dist = escape_time(quadratic_family(), g)
    brute = _brute_mask(g)
    assert np.mean(mask == brute) > 0.998
    assert np.all(dist[mask] == 0)
    assert np.all(dist[~mask] > 0)


def test_distance_estimate_is_lower_bound_scale():
    # exterior distance estimate vs true distance from c = 1 to M (about 0.75)
    g = ParamGrid(1.0 - 1e-9, 1.0 + 1e-9, -1e-9, 1e-9, 1, 1)
    _, dist = escape_time(quadratic_family(), g)
    assert 0.75 / 4 < dist[0, 0] < 4 * 0.75


def test_oracle_boundary_and_distance():
    m = np.zeros((9, 9), dtype=bool)
    m[3:6, 3:6] = True
    b = oracle_boundary(m)
    assert b[3, 3] and b[2, 4] and not b[4, 4] and not b[0, 0]
    d = boundary_distance(m)
    ref = ndimage.distance_transform_cdt(~b, metric="chessboard")
    assert np.array_equal(d, ref)


def test_raster_mass_near_boundary():
    g = ParamGrid(-2.5, 1.5, -2, 2, 128, 128)
    r = lyapunov_raster(quadratic_family(), g)
    chk = raster_vs_oracle(r, quadratic_family())
    assert chk.n_active > 0
    assert chk.fraction >= 0.99


def test_agreement_counts():
    g = ParamGrid(0, 1, 0, 1, 4, 4)
    a = np.ones((4, 4), dtype=bool)
    b = a.copy()
    b[0, 0] = False
    dist = np.full((4, 4), 5)
    rep = agreement(g, {"x": a, "y": b}, a, dist)
    assert rep.pairs == {"x~y": 15 / 16}
    assert rep.n_off_boundary == 16
