import math

import numpy as np
import pytest

from stability_lab import projective as pj
from stability_lab.family import FamilyError, power_family, quadratic_family
from stability_lab.postcritical import Window
from stability_lab.stats import substream
from stability_lab.webbuilder import (NoClearPointError, BasePoint, acriticality_check,
                                      atom_values, build_branch_tree, build_web, clearance,
                                      fs_directions, good_fraction, good_lines, pick_base,
                                      postcritical_points, slice_counts, tree_report,
                                      _markings)

EPS = 0.09


@pytest.fixture(scope="module")
def power_tree():
    f = power_family(2)
    a = BasePoint(0.0, 0.5 + 0.0j, 0.5, 1)
    tree = build_branch_tree(f, a, 0.1, eps=EPS, n_max=6, seed=1)
    return f, tree, build_web(tree)


@pytest.fixture(scope="module")
def quad_tree():
    f = quadratic_family()
    a = pick_base(f, Window.disc(0, 0.05), z0=0.2 + 0.3j, seed=7)
    tree = build_branch_tree(f, a, 0.1, eps=EPS, n_max=7, seed=7)
    return f, tree, build_web(tree)


def test_pick_base_near_zero():
    f = quadratic_family()
    a = pick_base(f, Window.disc(0, 0.05), N_scan=30, z0=0.2 + 0.3j)
    assert a.clearance > 0.05
    assert a.lam == 0 and a.z == 0.2 + 0.3j


def test_pick_base_rejects_postcritical_point():
    # 2 is post-critical for c = -2 (0 -> -2 -> 2 -> 2)
    f = quadratic_family()
    assert clearance(f, -2.0, 2.0, 30) < 1e-12
    with pytest.raises(NoClearPointError):
        pick_base(f, Window.disc(-2, 0.05), z0=2.0, budget=0)


def test_postcritical_points_quadratic():
    f = quadratic_family()
    pts = pj.affine(postcritical_points(f, -2.0, 3))     # (n_crit, N+1)
    fin = pts[np.isfinite(pts)]
    # orbit of the finite critical point: 0, -2, 2, 2
    assert np.allclose(np.sort(fin.real), [-2.0, 0.0, 2.0, 2.0])


def test_power_lines_all_good():
    f = power_family(2)
    lines = good_lines(f, BasePoint(0.0, 0.5, 0.5, 1), 0.1, N_max=25, n_lines=8, seed=2)
    assert good_fraction(lines) == 1.0
    assert all(l.tail_mass == 0 for l in lines)


def test_quadratic_lines_good_at_clear_base():
    f = quadratic_family()
    a = pick_base(f, Window.disc(0, 0.05), z0=0.2 + 0.3j)
    r = 0.1
    assert a.clearance > 2 * r
    lines = good_lines(f, a, r, eps=0.1, N_max=25, n_lines=12, seed=3)
    assert good_fraction(lines) == 1.0
    for l in lines:
        assert l.tail_mass >= 0 and l.good == (l.tail_mass <= 0.1)


def test_slice_monotonicity():
    f = quadratic_family()
    a = BasePoint(0.0, 0.2 + 0.3j, 0.3, 1)
    mk = _markings(f, a.lam)
    dirs = fs_directions(substream(5, 1), 6)
    seen = 0
    for r in (0.4, 0.3, 0.2):
        big, ok_b = slice_counts(f, mk, a, dirs, r, 12)
        small, ok_s = slice_counts(f, mk, a, dirs, r / 2, 12)
        both = ok_b & ok_s
        assert np.all(small[both] <= big[both])
        seen += int(np.count_nonzero(big[both]))
    assert seen > 0


def test_power_tree_is_binary(power_tree):
    f, tree, web = power_tree
    for lv in tree.levels:
        assert lv.S_size == 2**lv.n == lv.fiber_size
    for i in range(1, len(tree.levels)):
        assert np.array_equal(np.bincount(tree.levels[i].parent), np.full(2 ** (i - 1), 2))
    assert tree.mass_sequence() == [1.0] * len(tree.levels)


def test_power_web_defects(power_tree):
    f, tree, web = power_tree
    for s in web.samples:
        assert s.defect_interior == 0.0
        assert abs(s.defect - 2.0 / s.n) < 1e-12
        assert abs(s.total_weight - 1.0) < 1e-12


def test_power_acriticality_zero(power_tree):
    f, tree, web = power_tree
    rep = acriticality_check(tree, web, f, p_max=3)
    assert np.all(rep.estimates == 0)
    assert np.all(rep.min_distance > 0.1)


def test_quadratic_tree_invariants(quad_tree):
    f, tree, web = quad_tree
    d = 2
    seq = tree.mass_sequence()
    for lv in tree.levels:
        assert (1 - math.sqrt(EPS)) * d**lv.n <= lv.S_size <= d**lv.n
    assert all(b <= a + 1e-15 for a, b in zip(seq, seq[1:]))
    assert tree.max_parent_multiplicity() <= d
    assert tree.semiconjugacy_residual() < 1e-7


def test_quadratic_tree_fiber_consistency(quad_tree):
    f, tree, _ = quad_tree
    for lv in tree.levels[1:]:
        for i, lam in enumerate(tree.D0):
            x = pj.lift_affine(lv.ball[:, i, :])
            for _ in range(lv.n):
                x = f.step(lam, x)
            assert np.max(pj.chordal(x, pj.lift_affine(tree.B0)[None])) < 1e-6


def test_quadratic_web_weights_and_defect(quad_tree):
    f, tree, web = quad_tree
    seq = tree.mass_sequence()
    for s in web.samples:
        assert abs(s.total_weight - sum(seq[1 : s.n + 1]) / s.n) < 1e-12
        assert s.defect <= 3.0 / s.n + 1e-9
    vals, w = atom_values(tree, web.samples[-1], 0)
    assert vals.size == w.size and abs(w.sum() - web.samples[-1].total_weight) < 1e-12
    # atoms are distinct tracks
    assert np.unique(np.round(vals, 9)).size == vals.size


def test_tree_report_serializable(quad_tree):
    import json
    f, tree, web = quad_tree
    json.dumps(tree_report(tree, web), allow_nan=False)


def test_level_budget():
    f = quadratic_family()
    with pytest.raises(FamilyError):
        build_branch_tree(f, BasePoint(0.0, 0.5, 0.5, 1), 0.1, n_max=15)


def test_tree_is_seeded():
    f = quadratic_family()
    a = BasePoint(0.0, 0.2 + 0.3j, 0.3, 1)
    t1 = build_branch_tree(f, a, 0.1, n_max=3, seed=4)
    t2 = build_branch_tree(f, a, 0.1, n_max=3, seed=4)
    for l1, l2 in zip(t1.levels, t2.levels):
        assert np.array_equal(l1.ball, l2.ball)
