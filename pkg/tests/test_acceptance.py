"""Acceptance criteria 1 to 9.  Each test prints one PASS/FAIL line via conftest."""
import json
import math
import os
import time

import numpy as np
import pytest

from stability_lab import cli
from stability_lab import postcritical as pc
from stability_lab.equilibrium import birkhoff_lyapunov, sample_equilibrium
from stability_lab.family import (ParamGrid, critical_marking, quadratic_family,
                                  skew_product_family)
from stability_lab.lyapunov import approx_lyapunov, green_formula_lyapunov, lyapunov_raster
from stability_lab.misiurewicz import (RESIDUAL_MAX, TRANSVERSAL_MIN, check_in_bifurcation,
                                       find_misiurewicz)
from stability_lab.report import raster_vs_oracle, stability_report
from stability_lab.stats import substream
from stability_lab.webbuilder import (BasePoint, acriticality_check, build_branch_tree, build_web,
                                      good_lines, marginal_ks, pick_base)

LOG2 = math.log(2)
QUAD = quadratic_family()


@pytest.fixture(scope="module")
def raster512():
    t = time.time()
    r = lyapunov_raster(QUAD, ParamGrid(-2.5, 1.5, -2.0, 2.0, 512, 512), threads=4)
    return r, time.time() - t


@pytest.fixture(scope="module")
def web_tree():
    t = time.time()
    base = pick_base(QUAD, pc.Window.disc(0.0, 0.1), z0=0.2 + 0.3j, seed=7)
    lines = good_lines(QUAD, base, 0.1, 0.09, 25, 16, 7)
    tree = build_branch_tree(QUAD, base, 0.1, 0.25, 0.09, 12, lines, seed=7)
    web = build_web(tree)
    acrit = acriticality_check(tree, web, QUAD, p_max=3)
    return tree, web, acrit, time.time() - t


def test_criterion_1_lyapunov_oracles():
    t = time.time()
    for c in (0.0, -1.0, -2.0):
        a = approx_lyapunov(QUAD, c, 10).value
        smp = sample_equilibrium(QUAD, c, 4096, seed=1)
        b = birkhoff_lyapunov(QUAD, c, smp, 200).value
        g = green_formula_lyapunov(QUAD, c, 60)
        assert abs(a - LOG2) < 1e-2, (c, a)
        assert abs(b - LOG2) < 1e-2, (c, b)
        assert abs(g - LOG2) < 1e-2, (c, g)
    smp = sample_equilibrium(QUAD, 3.0, 4096, seed=1)
    b = birkhoff_lyapunov(QUAD, 3.0, smp, 200)
    g = green_formula_lyapunov(QUAD, 3.0, 60)
    assert abs(g - b.value) <= 3 * b.stderr, (g, b.value, b.stderr)
    assert g - LOG2 > 0.5 and b.value - LOG2 > 0.5
    assert time.time() - t < 60


def test_criterion_2_bifurcation_raster(raster512):
    r, dt = raster512
    t = time.time()
    chk = raster_vs_oracle(r, QUAD, radius_cells=2, max_iter=1000)
    assert chk.n_active > 0
    assert chk.fraction >= 0.99, chk.to_json()
    assert dt + time.time() - t < 600


def test_criterion_3_verdict_equivalence():
    rep = stability_report(QUAD, ParamGrid(-2.5, 1.5, -2.0, 2.0, 64, 64), N_max=20,
                           min_distance=2, threads=4)
    assert rep.n_off_boundary > 0
    for pair, frac in rep.pairs.items():
        assert frac >= 0.95, (pair, frac)


def _phase_balls(rng, c, r, n=8, radius=0.3):
    # the n = 0 track is lambda itself: keep every ball clear of the window
    out = []
    while len(out) < n:
        u = rng.random(2)
        z = complex(-1.8 + 3.6 * u[0], -1.8 + 3.6 * u[1])
        if abs(z - c) > r + radius:
            out.append((z, radius))
    return out


def _ball_verdicts(c, r, rng):
    c = complex(c)
    g = ParamGrid(c.real - 2 * r, c.real + 2 * r, c.imag - 2 * r, c.imag + 2 * r, 16, 16)
    mk = critical_marking(QUAD, g)
    wins = [pc.Window.disc(c, r, b) for b in _phase_balls(rng, c, r)]
    return [s.verdict for s in pc.ramification_batch(QUAD, mk, wins, 14, 8,
                                                     degree_fallback=False)]


def test_criterion_4_product_structure():
    rng = substream(0, 4)
    stable = [(0.0, 0.1), (-1.0, 0.05), (0.15 + 0.3j, 0.05), (1.0 + 1.0j, 0.1), (-2.5, 0.1)]
    straddling = [(-2.0, 0.05), (0.25, 0.05), (1j, 0.05)]
    for c, r in stable:
        v = _ball_verdicts(c, r, rng)
        assert v == ["converged"] * 8, (c, v)
    for c, r in straddling:
        v = _ball_verdicts(c, r, rng)
        assert any(x != "converged" for x in v), (c, v)


def test_criterion_5_web_bounds(web_tree):
    tree, web, acrit, dt = web_tree
    d = 2
    for lv in tree.levels:
        assert lv.S_size >= (1 - 0.3) * d**lv.n
    seq = tree.mass_sequence()
    assert all(b <= a for a, b in zip(seq, seq[1:]))
    assert tree.max_parent_multiplicity() <= 2
    assert tree.semiconjugacy_residual() < 1e-7
    for s in web.samples:
        assert s.defect <= 3.0 / s.n
    est = acrit.estimates[:, :4]
    assert est.shape[0] == 12
    assert np.all(est[-1] < 0.02), est[-1]
    assert np.all(est[-1] <= est[0])
    assert dt < 300


def test_criterion_6_web_marginals(web_tree):
    tree, web, _, _ = web_tree
    assert web.samples[-1].n == 12
    for i in range(3):
        ks = marginal_ks(QUAD, tree, web.samples[-1], i, 2048, seed=i)
        assert ks < 0.1, (tree.D0[i], ks)


def test_criterion_7_misiurewicz(raster512):
    r, _ = raster512
    a = find_misiurewicz(QUAD, (-2.05, -1.95, -0.05, 0.05), 2, 1, seed=0)
    b = find_misiurewicz(QUAD, (-0.05, 0.05, 0.95, 1.05), 3, 2, seed=0)
    ha = [h for h in a if abs(h.lam + 2) < 1e-9]
    hb = [h for h in b if abs(h.lam - 1j) < 1e-9]
    assert ha and hb
    for h in ha + hb:
        assert h.residual < RESIDUAL_MAX <= 1e-9 and h.transversality > TRANSVERSAL_MIN >= 1e-6
    assert check_in_bifurcation([ha[0], hb[0]], r) == [True, True]
    assert check_in_bifurcation([0.0], r) == [False]


def test_criterion_8_k2_normalized_mass():
    f = skew_product_family(2)
    U = pc.Window.disc(0.0, 0.1)
    est = [montecarlo for montecarlo in
           (pc.montecarlo_mass_k2(f, n, U, 20000, seed=n) for n in range(1, 7))]
    for i in range(len(est)):
        for j in range(i):
            a, b = est[i], est[j]
            tol = 3 * math.hypot(a.normalized_stderr, b.normalized_stderr)
            assert abs(a.normalized - b.normalized) <= tol, (a.n, b.n)


def _bytes(d):
    out = {}
    for name in sorted(os.listdir(d)):
        with open(os.path.join(d, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_criterion_9_determinism(tmp_path):
    runs = {
        "web": {"family": {"builtin": "quadratic"}, "region": {"disc": [0.0, 0.0, 0.1]},
                "z0": [0.2, 0.3], "n_max": 8, "n_lines": 8, "seed": 3, "write_atoms": True},
        "misiu": {"family": {"builtin": "quadratic"}, "rect": [-2.1, 0.5, -1.2, 1.2], "q": 3,
                  "p": 1, "n_starts": 6, "seed": 2, "raster": {"resolution": 128}},
        "lyap": {"family": {"builtin": "quadratic"}, "rect": [-2, 0.5, -1, 1], "resolution": 12,
                 "estimator": "birkhoff", "seed": 5,
                 "params": {"n_points": 256, "n_iter": 50}},
        "ram": {"family": {"builtin": "quadratic"}, "N_max": 8, "n_base": 4,
                "scan": {"rect": [-2, 0.5, -1, 1], "resolution": 6,
                         "balls": [{"center": [0.5, 0.5], "radius": 0.3}]}},
        "mass": {"family": {"builtin": "quadratic"},
                 "windows": [{"disc": [0.0, 0.0, 0.1]}], "N_max": 4, "n_base": 4},
    }
    for cmd, cfg in runs.items():
        cli.validate_config(cmd, cfg)
        cli.run(cmd, cfg, str(tmp_path / cmd / "a"), threads=1)
        cli.run(cmd, cfg, str(tmp_path / cmd / "b"), threads=4)
        assert _bytes(tmp_path / cmd / "a") == _bytes(tmp_path / cmd / "b"), cmd
    f = skew_product_family(2)
    U = pc.Window.disc(0.0, 0.1)
    assert pc.montecarlo_mass_k2(f, 3, U, 4000, seed=9) == pc.montecarlo_mass_k2(f, 3, U, 4000,
                                                                                 seed=9)
    s1 = sample_equilibrium(QUAD, -1.0, 512, seed=4)
    s2 = sample_equilibrium(QUAD, -1.0, 512, seed=4)
    assert np.array_equal(s1.affine(), s2.affine())
    assert (birkhoff_lyapunov(QUAD, -1.0, s1, 50).value
            == birkhoff_lyapunov(QUAD, -1.0, s2, 50).value)
