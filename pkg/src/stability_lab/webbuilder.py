"""Inverse-branch trees over good lines and balls, and Cesaro web measures.

Everything here is for ``k = m = 1`` and polynomial families: points of the
phase are kept in the affine chart, and post-critical tracks of finite
critical points are finite, so intersection counts are winding numbers.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import projective as pj
from .equilibrium import preimages
from .family import FamilyError, critical_marking, ParamGrid
from .postcritical import _finite_markings
from .stats import fsum, ks_distance, substream

DELTA_CRIT = 1e-4
EPS_DEFAULT = 0.09
TAU_DEFAULT = 0.25
LEVEL_BUDGET = 2**14
NEWTON_TOL = 1e-13


class NoClearPointError(FamilyError):
    def __init__(self, clearance):
        super().__init__(f"no base point with enough clearance (best {clearance:.3g})")
        self.clearance = clearance


class ExtensionError(FamilyError):
    """An S-branch failed to continue over the ball grid."""


def _require(family):
    if family.k != 1 or not family.is_polynomial():
        raise FamilyError("the web pipeline is implemented for polynomial families with k = 1")


def _markings(family, lam0, half_width=0.5, n=8):
    grid = ParamGrid.around(lam0, half_width, n)
    return critical_marking(family, grid)


# ---------------------------------------------------------------------------
# base point
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasePoint:
    lam: complex
    z: complex
    clearance: float
    attempts: int


def postcritical_points(family, lam, N, markings=None, offset=0):
    """``f^(offset+n)(c_j)`` at one parameter, ``n = 0..N``, shape ``(n_crit, N+1, 2)``."""
    lam = complex(lam)
    crit = family.critical_points(lam) if markings is None else np.stack(
        [mk.evaluate(np.array([lam]))[0][0] for mk in markings])
    out = np.empty((crit.shape[0], N + 1, 2), dtype=complex)
    x = crit
    for _ in range(offset):
        x = family.step(lam, x)
    for n in range(N + 1):
        out[:, n] = pj.normalize(x)
        x = family.step(lam, x)
    return out


def clearance(family, lam, z, N):
    pts = postcritical_points(family, lam, N)
    return float(np.min(pj.chordal(pts, pj.lift_affine(complex(z))[None, None, :])))


def pick_base(family, region, N_scan=30, z0=0.5 + 0.0j, min_clearance=0.05, budget=32,
              seed=0, jitter=0.25):
    """Base point ``(lambda0, z0)`` away from the first ``N_scan`` post-critical points.

    ``lambda0`` is the centre of ``region``; ``z0`` is tried first and then
    jittered (seeded) up to ``budget`` times.
    """
    _require(family)
    lam0 = complex(region.center) if hasattr(region, "center") else complex(region)
    rng = substream(seed, 0)
    best = -1.0
    z = complex(z0)
    for attempt in range(budget + 1):
        c = clearance(family, lam0, z, N_scan)
        if c > min_clearance:
            return BasePoint(lam0, z, c, attempt + 1)
        best = max(best, c)
        u = rng.random(2)
        z = complex(z0) + jitter * math.sqrt(u[0]) * complex(math.cos(2 * math.pi * u[1]),
                                                             math.sin(2 * math.pi * u[1]))
    raise NoClearPointError(best)


# ---------------------------------------------------------------------------
# winding numbers on circles
# ---------------------------------------------------------------------------

def _winding(vals):
    """Winding numbers of closed sampled curves ``vals[..., i]`` around 0 and a resolution flag.

    A segment is trusted when it turns by less than a quarter turn and moves
    by less than half its distance to the origin.
    """
    nxt = np.roll(vals, -1, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        dang = np.angle(nxt / vals)
        step = np.abs(nxt - vals)
    ok = np.all((np.abs(dang) < math.pi / 2) & (step < 0.5 * np.abs(vals)), axis=-1)
    ok &= np.all(np.isfinite(vals), axis=-1)
    w = np.rint(np.nansum(dang, axis=-1) / (2 * math.pi)).astype(int)
    return w, ok


def slice_counts(family, markings, base, directions, r, N, n_circle=256, max_circle=4096):
    """Intersections of ``f^n(f(c_j))`` graphs with the discs ``base + t v``, ``|t| < r``.

    Returns ``(counts, ok)`` of shape ``(n_lines, N+1)``, counted with
    multiplicity as winding numbers of ``gamma_n(lambda(t)) - z(t)`` on
    ``|t| = r``; circles are refined up to ``max_circle`` points.
    """
    v = np.asarray(directions, dtype=complex).reshape(-1, 2)
    L = v.shape[0]
    counts = np.zeros((L, N + 1), dtype=int)
    ok = np.zeros((L, N + 1), dtype=bool)
    todo = np.arange(L)
    m = n_circle
    finite = _finite_markings(markings)
    while todo.size and m <= max_circle:
        th = 2 * math.pi * np.arange(m) / m
        t = r * np.exp(1j * th)
        lam = base.lam + t[None, :] * v[todo, 0:1]
        z = base.z + t[None, :] * v[todo, 1:2]
        cnt = np.zeros((todo.size, N + 1), dtype=int)
        good = np.ones((todo.size, N + 1), dtype=bool)
        flat = lam.ravel()
        for mk in finite:
            x, _ = mk.evaluate(flat)
            x = family.step(flat, x)
            for n in range(N + 1):
                xx = x.reshape(todo.size, m, 2)
                phi = (xx[..., 0] - z * xx[..., 1]) * np.conj(xx[..., 1])
                w, g = _winding(phi)
                cnt[:, n] += mk.multiplicity * w
                good[:, n] &= g
                if n < N:
                    x = family.step(flat, x)
        done = np.all(good, axis=1)
        counts[todo[done]] = cnt[done]
        ok[todo[done]] = True
        # keep partial results for lines that will not be refined further
        counts[todo[~done]] = np.where(good[~done], cnt[~done], 0)
        ok[todo[~done]] = good[~done]
        todo = todo[~done]
        m *= 2
    return counts, ok


# ---------------------------------------------------------------------------
# good lines
# ---------------------------------------------------------------------------

@dataclass
class LineSample:
    direction: np.ndarray
    radius: float
    counts: np.ndarray
    resolved: np.ndarray
    tail_mass: float
    good: bool
    failures: int

    def to_json(self):
        return {
            "direction": [[float(c.real), float(c.imag)] for c in self.direction],
            "radius": self.radius, "tail_mass": self.tail_mass, "good": self.good,
            "failures": self.failures, "counts": [int(c) for c in self.counts],
        }


def fs_directions(rng, n):
    g = rng.normal(size=(n, 2, 2))
    v = g[..., 0] + 1j * g[..., 1]
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def good_lines(family, a, r, eps=EPS_DEFAULT, N_max=25, n_lines=16, seed=0, markings=None,
               directions=None):
    """FS-uniform complex lines through ``a`` with their sliced post-critical masses."""
    _require(family)
    if markings is None:
        markings = _markings(family, a.lam)
    if directions is None:
        directions = fs_directions(substream(seed, 1), n_lines)
    counts, ok = slice_counts(family, markings, a, directions, r, N_max)
    d = float(family.d ** family.k)
    out = []
    for i in range(len(directions)):
        fails = int(np.count_nonzero(~ok[i]))
        tail = fsum(counts[i] * d ** (-np.arange(N_max + 1.0)))
        good = fails == 0 and tail <= eps
        out.append(LineSample(np.asarray(directions[i]), float(r), counts[i], ok[i],
                              float(tail), bool(good), fails))
    return out


def good_fraction(lines):
    return sum(l.good for l in lines) / max(len(lines), 1)


# ---------------------------------------------------------------------------
# branch continuation
# ---------------------------------------------------------------------------

@dataclass
class _Paths:
    """Straight paths from the base point; ``lam``, ``z`` have shape ``(P, K+1)``."""

    lam: np.ndarray
    z: np.ndarray
    crit_values: np.ndarray      # (P, K+1, n_cv) finite critical values (affine)

    @property
    def shape(self):
        return self.lam.shape


def _make_paths(family, base, ends_lam, ends_z, K):
    s = np.arange(K + 1) / K
    lam = base.lam + s[None, :] * (ends_lam[:, None] - base.lam)
    z = base.z + s[None, :] * (ends_z[:, None] - base.z)
    crit = family.critical_points(lam)                    # (P, K+1, 2d-2, 2)
    cv = pj.normalize(family.step(lam[..., None], crit))
    fin = np.abs(cv[..., 1]) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(fin, cv[..., 0] / cv[..., 1], np.nan)
    keep = np.any(fin.reshape(-1, fin.shape[-1]), axis=0)
    return _Paths(lam, z, vals[..., keep])


def _newton_preimage(family, lam, y, w, iters=8):
    """Root of ``f_lambda(w) = y`` near ``w`` (affine), with convergence mask."""
    ok = np.zeros(w.shape, dtype=bool)
    for _ in range(iters):
        X = pj.lift_affine(w)
        f, jac, _ = family.lift_jet(lam, X)
        g = f[..., 0] - y * f[..., 1]
        dg = jac[..., 0, 0] - y * jac[..., 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            step = g / dg
        step = np.where(np.isfinite(step), step, np.nan)
        w = w - step
        ok = np.abs(step) <= NEWTON_TOL * (1.0 + np.abs(w))
    # residual check in the chordal metric
    X = pj.lift_affine(w)
    img = family.lift(lam, X)
    res = pj.chordal(img, pj.lift_affine(y))
    return w, ok & np.isfinite(w) & (res < 1e-9), res


def _continue_level(family, paths, parent_vals, parent_ok, start, parent_idx, d_crit):
    """Continue each child branch along all paths.

    ``parent_vals`` has shape ``(n_parent, P, K+1)``; ``start`` holds the
    child values at the base point and ``parent_idx`` the parent of each
    child.  Returns child values (NaN where failed), a success mask over
    ``(n_child, P)`` and the worst semiconjugacy residual.
    """
    nc = start.size
    P, K1 = paths.shape
    vals = np.full((nc, P, K1), np.nan + 0j)
    vals[:, :, 0] = start[:, None]
    ok = parent_ok[parent_idx].copy()
    worst = 0.0
    # parents passing near a critical value make every child fail
    cv = paths.crit_values                                   # (P, K1, n_cv)
    pv = parent_vals[parent_idx]                             # (nc, P, K1)
    near = np.zeros((nc, P), dtype=bool)
    for j in range(cv.shape[-1]):
        dist = pj.chordal(pj.lift_affine(pv), pj.lift_affine(cv[None, :, :, j]))
        near |= np.any(dist < d_crit, axis=2)
    ok &= ~near
    for k in range(1, K1):
        w0 = vals[:, :, k - 1]
        y = pv[:, :, k]
        lam = np.broadcast_to(paths.lam[None, :, k], w0.shape)
        w, conv, res = _newton_preimage(family, lam, y, w0)
        # the Newton root must be the one the path was following
        jump = np.abs(w - w0) > 0.5 * _root_gap(family, lam, w)
        good = conv & ~jump & ok
        ok &= good
        vals[:, :, k] = np.where(ok, w, np.nan)
        if np.any(ok):
            worst = max(worst, float(np.max(np.where(ok, res, 0.0))))
    return vals, ok, worst


def _root_gap(family, lam, w):
    """Distance from ``w`` to the nearest other root of ``f_lambda(.) = f_lambda(w)``."""
    shp = w.shape
    wf = w.reshape(-1)
    lf = np.broadcast_to(lam, shp).reshape(-1)
    out = np.full(wf.shape, np.inf)
    fin = np.isfinite(wf)
    if not np.any(fin):
        return out.reshape(shp)
    X = pj.lift_affine(wf[fin])
    y = pj.normalize(family.lift(lf[fin], X))
    P, Q = np.moveaxis(family.forms(lf[fin]), -2, 0)
    fib = y[:, 1:2] * P - y[:, 0:1] * Q
    r = pj.binary_form_roots(fib)
    with np.errstate(divide="ignore", invalid="ignore"):
        ra = r[..., 0] / r[..., 1]
    dist = np.abs(ra - wf[fin, None])
    dist = np.where(np.isfinite(dist), dist, np.inf)
    dist.sort(axis=1)
    if dist.shape[1] > 1:
        out[fin] = dist[:, 1]
    return out.reshape(shp)


def _circle_obstruction(paths_ring, parent_ring):
    """Winding test: does the parent branch meet a critical value inside the disc?

    ``paths_ring`` holds the critical values on the outer circle of each
    line (shape ``(L, R, n_cv)``) and ``parent_ring`` the parent values
    ``(n, L, R)``.  Returns ``(obstructed, unresolved)`` masks ``(n, L)``.
    """
    obstructed = np.zeros(parent_ring.shape[:2], dtype=bool)
    unresolved = np.zeros_like(obstructed)
    for j in range(paths_ring.shape[-1]):
        diff = parent_ring - paths_ring[None, :, :, j]
        w, ok = _winding(diff)
        obstructed |= ok & (w != 0)
        unresolved |= ~ok
    return obstructed, unresolved


# ---------------------------------------------------------------------------
# branch tree
# ---------------------------------------------------------------------------

@dataclass
class BranchLevel:
    n: int
    points: np.ndarray          # (d^n,) affine preimages at the base parameter
    parent: np.ndarray          # (d^n,) index into the previous level
    line_ok: np.ndarray         # (d^n, n_good_lines)
    in_S: np.ndarray            # (d^n,)
    ball: np.ndarray            # (n_S, n_D0, n_B0) values of S-branches on the ball grid
    semiconj_residual: float

    @property
    def fiber_size(self):
        return int(self.points.size)

    @property
    def S_size(self):
        return int(np.count_nonzero(self.in_S))

    @property
    def S_index(self):
        return np.nonzero(self.in_S)[0]

    def max_children(self, prev_size):
        if self.n == 0:
            return 0
        return int(np.max(np.bincount(self.parent, minlength=prev_size)))


@dataclass
class BranchTree:
    family_name: str
    base: BasePoint
    r: float
    tau: float
    eps: float
    lines: list
    D0: np.ndarray              # (n_D0,) parameters
    B0: np.ndarray              # (n_B0,) phase points
    levels: list = field(default_factory=list)

    @property
    def d(self):
        if len(self.levels) > 1:
            return int(self.levels[1].fiber_size)
        return 2

    def mass_sequence(self):
        return [lv.S_size / float(lv.fiber_size) for lv in self.levels]

    def semiconjugacy_residual(self):
        return max([lv.semiconj_residual for lv in self.levels] + [0.0])

    def max_parent_multiplicity(self):
        out = 0
        for i in range(1, len(self.levels)):
            out = max(out, self.levels[i].max_children(self.levels[i - 1].fiber_size))
        return out


def _ball_grid(base, radius, n_d0, n_b0, seed):
    """D0: polar grid in the parameter disc; B0: seeded uniform points of the phase disc."""
    rr = radius * np.sqrt((np.arange(n_d0 // 8 if n_d0 >= 9 else 1) + 0.5)
                          / max(n_d0 // 8 if n_d0 >= 9 else 1, 1))
    pts = [base.lam]
    n_ring = max(n_d0 - 1, 0)
    if n_ring:
        per = max(n_ring // len(rr), 1)
        for i, rad in enumerate(rr):
            cnt = per if i < len(rr) - 1 else n_ring - per * (len(rr) - 1)
            th = 2 * math.pi * (np.arange(cnt) + 0.5 * i) / max(cnt, 1)
            pts.extend(base.lam + rad * np.exp(1j * th))
    D0 = np.array(pts[:n_d0], dtype=complex)
    u = substream(seed, 2).random((n_b0, 2))
    B0 = base.z + radius * np.sqrt(u[:, 0]) * np.exp(2j * math.pi * u[:, 1])
    return D0, B0


def build_branch_tree(family, a, r, tau=TAU_DEFAULT, eps=EPS_DEFAULT, n_max=12, lines=None,
                      n_rays=12, n_steps=3, n_d0=9, n_b0=8, d_crit=DELTA_CRIT, seed=0,
                      markings=None):
    """Inverse branches of ``f^n`` at ``a`` over good line discs and the ball ``B(a, tau r)``.

    Level ``n`` solves ``f_lambda(w) = (level n-1 value)`` along straight
    paths from ``a`` by Newton continuation.  A (branch, line) pair fails
    when the path passes within ``d_crit`` of a critical value, Newton
    jumps roots, or the parent branch meets a critical value inside the disc
    (winding test on the boundary circle).  S-branches are those defined on
    at least ``1 - 2 sqrt(eps)`` of all sampled lines; they must extend over
    the ball grid ``D0 x B0`` or ExtensionError is raised.
    """
    _require(family)
    d = family.d
    if d ** (family.k * n_max) > LEVEL_BUDGET:
        raise FamilyError(f"level budget exceeded: d^(k n_max) > {LEVEL_BUDGET}")
    if lines is None:
        lines = good_lines(family, a, r, eps, seed=seed, markings=markings)
    good = [l for l in lines if l.good]
    n_all = len(lines)
    if len(good) < 0.5 * n_all:
        raise FamilyError("fewer than half of the sampled lines are good")
    # line paths: rays of each good disc
    th = 2 * math.pi * np.arange(n_rays) / n_rays
    v = np.array([l.direction for l in good]).reshape(-1, 2)
    t_end = r * np.exp(1j * th)
    ends_lam = (a.lam + t_end[None, :] * v[:, 0:1]).ravel()
    ends_z = (a.z + t_end[None, :] * v[:, 1:2]).ravel()
    lp = _make_paths(family, a, ends_lam, ends_z, n_steps)
    Lg = len(good)
    # ball paths: D0 x B0 inside B(a, tau r)
    rad = tau * r / 2.0
    D0, B0 = _ball_grid(a, rad, n_d0, n_b0, seed)
    bl = np.repeat(D0, B0.size)
    bz = np.tile(B0, D0.size)
    bp = _make_paths(family, a, bl, bz, n_steps)
    ring_cv = lp.crit_values[:, -1].reshape(Lg, n_rays, -1)

    tree = BranchTree(family.name, a, float(r), float(tau), float(eps), lines, D0, B0)
    # level 0: the identity branch (z itself)
    pts = np.array([a.z])
    lvals = lp.z[None]                       # (1, P, K+1)
    lok = np.ones((1, lp.shape[0]), dtype=bool)
    bvals = bp.z[None]
    line_ok = np.ones((1, Lg), dtype=bool)
    thresh = (1.0 - 2.0 * math.sqrt(eps)) * n_all
    in_S = np.array([line_ok[0].sum() >= thresh])
    ball0 = bz.reshape(1, D0.size, B0.size)
    tree.levels.append(BranchLevel(0, pts, np.array([-1]), line_ok, in_S, ball0, 0.0))
    S_prev = np.nonzero(in_S)[0]
    for n in range(1, n_max + 1):
        # fibre at the base parameter, ordered by parent
        pre = preimages(family, a.lam, pj.lift_affine(pts))           # (n_prev, d, 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            child = (pre[..., 0] / pre[..., 1]).ravel()
        if not np.all(np.isfinite(child)):
            raise FamilyError("preimage at infinity; choose another base point")
        parent = np.repeat(np.arange(pts.size), d)
        # parents meeting a critical value inside a disc obstruct all children
        obst, unres = _circle_obstruction(
            ring_cv, lvals[:, :, -1].reshape(pts.size, Lg, n_rays))
        pl_ok = lok.reshape(pts.size, Lg, n_rays).all(axis=2) & ~obst & ~unres
        pl_ok_paths = np.repeat(pl_ok, n_rays, axis=1)
        cvals, cok, res_l = _continue_level(family, lp, lvals, pl_ok_paths, child, parent, d_crit)
        line_ok = cok.reshape(child.size, Lg, n_rays).all(axis=2)
        in_S = line_ok.sum(axis=1) >= thresh
        # S-branches over the ball grid
        S = np.nonzero(in_S)[0]
        if not np.all(np.isin(parent[S], S_prev)):
            raise FamilyError("S-branch with a parent outside S (tree closure violated)")
        pos = {int(s): i for i, s in enumerate(S_prev)}
        pidx = np.array([pos[int(p)] for p in parent[S]], dtype=int)
        bok_parent = np.ones((S_prev.size, bp.shape[0]), dtype=bool)
        bv, bok, res_b = _continue_level(family, bp, bvals, bok_parent, child[S], pidx, 0.0)
        if not np.all(bok):
            bad = int(np.count_nonzero(~np.all(bok, axis=1)))
            raise ExtensionError(
                f"level {n}: {bad} S-branches failed to extend over the ball grid "
                f"B(a, {tau} r); the extension surrogate is falsified for these parameters")
        # semiconjugacy at the ball grid end points
        end = bv[:, :, -1]
        img = family.lift(bp.lam[None, :, -1], pj.lift_affine(end))
        tgt = pj.lift_affine(bvals[pidx][:, :, -1])
        semi = float(np.max(pj.chordal(img, tgt))) if end.size else 0.0
        tree.levels.append(BranchLevel(n, child, parent, line_ok, in_S,
                                       end.reshape(S.size, D0.size, B0.size),
                                       max(semi, res_b)))
        pts, lvals, lok, bvals, S_prev = child, cvals, cok, bv, S
    return tree


# ---------------------------------------------------------------------------
# web measures
# ---------------------------------------------------------------------------

@dataclass
class WebSample:
    """Cesaro web ``M^n = (1/n) sum_{j=1..n} m^j`` on the atoms of levels ``1..n``."""

    n: int
    levels: list                 # level indices of the atoms
    weights: list                # per level: (n_S_j,) weight of each branch (summed over B0)
    defect: float
    defect_interior: float

    @property
    def total_weight(self):
        return fsum([fsum(w) for w in self.weights])


@dataclass
class WebReport:
    samples: list
    mass_sequence: list

    @property
    def defects(self):
        return [s.defect for s in self.samples]


def build_web(tree, n_max=None):
    """Cesaro means of ``m^j(z)`` over the B0 samples and their invariance defects.

    ``F`` pushes a level-j atom to its parent's atom at level ``j-1`` (same
    base point ``z``), so the total variation is computed exactly on branch
    identities.  ``defect`` is the full ``||M^n - F_* M^n||``; the interior
    part omits the image of level 1 and the unmatched top level.
    """
    levels = tree.levels
    n_max = len(levels) - 1 if n_max is None else min(n_max, len(levels) - 1)
    dk = float(levels[1].fiber_size) if len(levels) > 1 else 2.0
    samples = []
    for n in range(1, n_max + 1):
        ws = []
        for j in range(1, n + 1):
            ws.append(np.full(levels[j].S_size, dk ** (-j) / n))
        # F_* M^n: each S-branch of level j sends its weight to its parent at level j-1
        interior = []
        for j in range(1, n):
            lv, up = levels[j], levels[j + 1]
            Sj = lv.S_index
            pos = {int(s): i for i, s in enumerate(Sj)}
            pushed = np.zeros(Sj.size)
            for s in up.S_index:
                pushed[pos[int(up.parent[s])]] += dk ** (-(j + 1)) / n
            interior.append(np.abs(ws[j - 1] - pushed))
        image_of_first = fsum(ws[0])           # lands on level 0, outside M^n
        top = fsum(ws[-1])                     # level n has no preimage in M^n
        inner = fsum([fsum(x) for x in interior]) if interior else 0.0
        samples.append(WebSample(n, list(range(1, n + 1)), ws,
                                 image_of_first + inner + top, inner))
    return WebReport(samples, tree.mass_sequence()[: n_max + 1])


def atom_values(tree, web_sample, d0_index):
    """Values and weights of the atoms of ``M^n`` at the parameter ``D0[d0_index]``."""
    vals, wts = [], []
    nb = tree.B0.size
    for j, w in zip(web_sample.levels, web_sample.weights):
        ball = tree.levels[j].ball[:, d0_index, :]           # (n_S, n_B0)
        vals.append(ball.ravel())
        wts.append(np.repeat(w / nb, nb))
    return np.concatenate(vals), np.concatenate(wts)


def marginal_ks(family, tree, web_sample, d0_index, n_points=2048, seed=0, depth=30):
    """Weighted KS distance of atom arguments against an equilibrium sample.

    The web atoms and a fresh inverse-iteration sample of ``mu_lambda`` are
    compared through the argument ``arg(w)`` (a one-dimensional projection).
    """
    from .equilibrium import sample_equilibrium
    lam = tree.D0[d0_index]
    vals, wts = atom_values(tree, web_sample, d0_index)
    smp = sample_equilibrium(family, lam, n_points, depth, seed)
    ref = smp.affine()
    return ks_distance(np.angle(vals), np.angle(ref), wts / wts.sum(), None)


# ---------------------------------------------------------------------------
# acriticality
# ---------------------------------------------------------------------------

@dataclass
class AcriticalityReport:
    p_max: int
    tol: float
    estimates: np.ndarray        # (n_max, p_max+1): M^n(Y_p), rows n = 1..n_max
    bounds: np.ndarray           # (n_max, p_max+1): d^p * sliced mass at level n+p
    bound_se: np.ndarray
    min_distance: np.ndarray     # (n_max, p_max+1)
    note: str = "graphs contained in post-critical tracks are not separated out"

    def to_json(self):
        return {
            "p_max": self.p_max, "tol": self.tol,
            "estimates": self.estimates.tolist(), "bounds": self.bounds.tolist(),
            "bound_se": self.bound_se.tolist(), "min_distance": self.min_distance.tolist(),
            "note": self.note,
        }


def acriticality_check(tree, web, family, p_max=3, tol=1e-3, markings=None, N_slice=None):
    """Weight of web atoms within ``tol`` of the tracks ``f^p(c_j)`` on the D0 grid.

    Also returns the sliced-mass upper bound ``d^p * E[||R_{n+p} ^ [Delta_{tau r}]||]``
    over the sampled lines (bad lines contribute their counts too).
    """
    levels = tree.levels
    n_max = len(web.samples)
    D0 = tree.D0
    if markings is None:
        markings = _markings(family, tree.base.lam)
    # post-critical tracks f^p(c_j) on D0, p = 0..p_max (all critical points)
    crit = np.stack([mk.evaluate(D0)[0] for mk in markings])        # (n_c, n_D0, 2)
    Y = []
    x = crit
    for p in range(p_max + 1):
        Y.append(pj.normalize(x))
        x = family.step(D0[None, :], x)
    # per level and p: weight of close atoms and min distance
    dist_lp = {}
    for j in range(1, len(levels)):
        ball = levels[j].ball                                       # (n_S, n_D0, n_B0)
        bx = pj.lift_affine(ball)
        for p in range(p_max + 1):
            dmin = np.full(ball.shape[0] * ball.shape[2], np.inf)
            for c in range(Y[p].shape[0]):
                dd = pj.chordal(bx, Y[p][c][None, :, None, :])          # (n_S, n_D0, n_B0)
                dmin = np.minimum(dmin, np.min(dd, axis=1).ravel())
            dist_lp[(j, p)] = dmin.reshape(ball.shape[0], ball.shape[2])
    est = np.zeros((n_max, p_max + 1))
    mind = np.full((n_max, p_max + 1), np.inf)
    nb = tree.B0.size
    for i, ws in enumerate(web.samples):
        for p in range(p_max + 1):
            acc = []
            for j, w in zip(ws.levels, ws.weights):
                dm = dist_lp[(j, p)]
                close = dm < tol
                acc.append(fsum((w[:, None] / nb * close).ravel()))
                if dm.size:
                    mind[i, p] = min(mind[i, p], float(dm.min()))
            est[i, p] = fsum(acc)
    # Step-5 bound from sliced masses on Delta_{tau r}
    N = n_max + p_max if N_slice is None else N_slice
    dirs = np.array([l.direction for l in tree.lines])
    counts, ok = slice_counts(family, markings, tree.base, dirs, tree.tau * tree.r, N)
    dk = float(family.d ** family.k)
    sliced = counts * dk ** (-np.arange(N + 1.0))[None, :]
    sliced = np.where(ok, sliced, np.nan)
    bounds = np.zeros_like(est)
    bse = np.zeros_like(est)
    for i in range(n_max):
        n = i + 1
        for p in range(p_max + 1):
            col = sliced[:, min(n + p, N)]
            col = col[np.isfinite(col)]
            bounds[i, p] = dk**p * (col.mean() if col.size else np.nan)
            bse[i, p] = dk**p * (col.std(ddof=1) / math.sqrt(col.size) if col.size > 1 else 0.0)
    return AcriticalityReport(p_max, tol, est, bounds, bse, mind)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def tree_report(tree, web=None, acrit=None):
    levels = []
    for i, lv in enumerate(tree.levels):
        entry = {"n": lv.n, "fiber_size": lv.fiber_size, "S_size": lv.S_size,
                 "semiconjugacy_residual": lv.semiconj_residual}
        if web is not None and 1 <= i <= len(web.samples):
            s = web.samples[i - 1]
            entry["defect"] = s.defect
            entry["defect_interior"] = s.defect_interior
            entry["defect_bound"] = 3.0 / i
        if acrit is not None and 1 <= i <= acrit.estimates.shape[0]:
            entry["Yp_estimates"] = acrit.estimates[i - 1].tolist()
            entry["Yp_bounds"] = acrit.bounds[i - 1].tolist()
        levels.append(entry)
    b = tree.base
    return {
        "base": {"lambda": [b.lam.real, b.lam.imag], "z": [b.z.real, b.z.imag],
                 "clearance": b.clearance},
        "r": tree.r, "tau": tree.tau, "eps": tree.eps,
        "lines": {"n": len(tree.lines), "good": sum(l.good for l in tree.lines)},
        "levels": levels,
    }


def write_tree_json(tree, path, web=None, acrit=None, meta=None):
    obj = dict(meta or {})
    obj.update(tree_report(tree, web, acrit))
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_atoms_csv(tree, path):
    """Atom tracks: one row per (level, branch, D0 point, B0 point)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "branch", "lambda_re", "lambda_im", "z_re", "z_im", "re", "im"])
        for lv in tree.levels:
            for i, s in enumerate(lv.S_index):
                for a, lam in enumerate(tree.D0):
                    for b, z in enumerate(tree.B0):
                        v = lv.ball[i, a, b]
                        w.writerow([lv.n, int(s), repr(lam.real), repr(lam.imag),
                                    repr(z.real), repr(z.imag), repr(v.real), repr(v.imag)])
