import cmath
import json

import numpy as np
import pytest

from stability_lab.family import ParamGrid, power_family, quadratic_family
from stability_lab.lyapunov import lyapunov_raster
from stability_lab.misiurewicz import (RESIDUAL_MAX, TRANSVERSAL_MIN, OutOfRasterError,
                                       check_in_bifurcation, continue_cycle, critical_jet,
                                       find_misiurewicz, orbit_jet, write_hits_json)


@pytest.fixture(scope="module")
def raster():
    return lyapunov_raster(quadratic_family(), ParamGrid(-2.5, 1.5, -2, 2, 256, 256))


def test_orbit_jet_against_finite_differences():
    f = quadratic_family()
    lam, z, h = 0.3 - 0.2j, 0.1 + 0.4j, 1e-6
    v, dz, dl = orbit_jet(f, lam, z, 4)
    vz = (orbit_jet(f, lam, z + h, 4)[0] - orbit_jet(f, lam, z - h, 4)[0]) / (2 * h)
    vl = (orbit_jet(f, lam + h, z, 4)[0] - orbit_jet(f, lam - h, z, 4)[0]) / (2 * h)
    assert abs(dz - vz) < 1e-6 * abs(vz)
    assert abs(dl - vl) < 1e-6 * abs(vl)


def test_critical_jet_quadratic():
    c, dc = critical_jet(quadratic_family(), 0.3j, 0.0)
    assert abs(c) < 1e-12 and abs(dc) < 1e-10


def test_fixed_point_continuation_closed_form():
    # w(c) = (1 + sqrt(1 - 4c)) / 2, w'(c) = -1 / sqrt(1 - 4c)
    for c in (-2.0, -1.5 + 0.3j):
        w, mult, dw = continue_cycle(quadratic_family(), c, 1.9, 1)
        s = cmath.sqrt(1 - 4 * c)
        assert abs(w - (1 + s) / 2) < 1e-13
        assert abs(mult - (1 + s)) < 1e-12
        assert abs(dw + 1 / s) < 1e-9


def test_hit_at_minus_two():
    hits = find_misiurewicz(quadratic_family(), (-2.05, -1.95, -0.05, 0.05), 2, 1, seed=0)
    assert len(hits) == 1
    h = hits[0]
    assert abs(h.lam + 2) < 1e-12
    assert abs(h.h_prime - (-8 / 3)) < 1e-6
    assert abs(h.multiplier_modulus - 4) < 1e-9
    assert h.residual < RESIDUAL_MAX and h.transversality > TRANSVERSAL_MIN


def test_hit_at_i():
    hits = find_misiurewicz(quadratic_family(), (-0.05, 0.05, 0.95, 1.05), 3, 2, seed=0)
    assert any(abs(h.lam - 1j) < 1e-10 for h in hits)
    h = [h for h in hits if abs(h.lam - 1j) < 1e-10][0]
    assert h.p == 2 and h.multiplier_modulus > 1


def test_power_family_has_no_hits():
    hits = find_misiurewicz(power_family(2), (-0.5, 0.5, -0.5, 0.5), 2, 1, n_starts=3)
    assert len(hits) == 0
    assert hits.n_starts == 3


def test_hits_satisfy_invariants():
    hits = find_misiurewicz(quadratic_family(), (-2.1, 0.5, -1.2, 1.2), 3, 1, n_starts=12, seed=2)
    for h in hits:
        assert h.residual < RESIDUAL_MAX
        assert h.transversality > TRANSVERSAL_MIN
        assert h.multiplier_modulus > 1
    lams = [h.lam for h in hits]
    for i in range(len(lams)):
        for j in range(i):
            assert abs(lams[i] - lams[j]) > 1e-8


def test_search_is_seeded():
    a = find_misiurewicz(quadratic_family(), (-2.1, 0.5, -1.2, 1.2), 3, 1, n_starts=6, seed=5)
    b = find_misiurewicz(quadratic_family(), (-2.1, 0.5, -1.2, 1.2), 3, 1, n_starts=6, seed=5)
    assert [h.to_json() for h in a] == [h.to_json() for h in b]


def test_check_in_bifurcation(raster):
    assert check_in_bifurcation([-2.0, 1j, 0.0], raster) == [True, True, False]


def test_check_out_of_raster(raster):
    with pytest.raises(OutOfRasterError):
        check_in_bifurcation([5.0], raster)


def test_found_hits_lie_in_bifurcation_locus(raster):
    hits = find_misiurewicz(quadratic_family(), (-2.1, 0.5, -1.2, 1.2), 3, 1, n_starts=12, seed=2)
    assert all(check_in_bifurcation(hits, raster))


def test_hits_json(tmp_path):
    hits = find_misiurewicz(quadratic_family(), (-2.05, -1.95, -0.05, 0.05), 2, 1, seed=0)
    p = tmp_path / "hits.json"
    write_hits_json(hits, p, [True])
    obj = json.loads(p.read_text())
    assert obj["hits"][0]["in_bifurcation"] is True
    assert obj["search"]["n_hits"] == 1
