"""Masses of post-critical graphs, ramification series and their verdicts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import projective as pj
from .family import FamilyError, MotionTrack, ParamGrid, critical_marking
from .stats import fsum, linear_fit, substream

TAU_LAPLACIAN = 1e-4
TAU_RATE = 0.02
EPS_FIT = 0.02
TAIL_REL = 0.05
VARIATION = 0.5
MAX_LEVEL = 4


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """Product window ``U x B``: parameter rect or disc times a phase ball.

    The ball is the affine disc ``|z - a| < rho`` for finite ``a``, the
    neighbourhood ``|z| > 1/rho`` of infinity for ``a = inf``, and all of
    P^1 when ``ball_center`` is None.
    """

    kind: str
    params: tuple
    ball_center: complex | None = None
    ball_radius: float = 0.0

    @classmethod
    def rect(cls, re0, re1, im0, im1, ball=None):
        c, r = ball if ball is not None else (None, 0.0)
        return cls("rect", (float(re0), float(re1), float(im0), float(im1)), c, float(r))

    @classmethod
    def disc(cls, center, radius, ball=None):
        c, r = ball if ball is not None else (None, 0.0)
        center = complex(center)
        return cls("disc", (center.real, center.imag, float(radius)), c, float(r))

    @classmethod
    def cell(cls, grid, index, ball=None):
        iy, ix = divmod(int(index), grid.nx)
        re0 = grid.re0 + ix * grid.hx
        im0 = grid.im0 + iy * grid.hy
        return cls.rect(re0, re0 + grid.hx, im0, im0 + grid.hy, ball)

    def with_ball(self, center, radius):
        return Window(self.kind, self.params, center, float(radius))

    @property
    def area(self):
        if self.kind == "rect":
            a, b, c, d = self.params
            return (b - a) * (d - c)
        return math.pi * self.params[2] ** 2

    @property
    def center(self):
        if self.kind == "rect":
            a, b, c, d = self.params
            return complex(0.5 * (a + b), 0.5 * (c + d))
        return complex(self.params[0], self.params[1])

    def bounding_grid(self, n):
        if self.kind == "rect":
            a, b, c, d = self.params
        else:
            x, y, r = self.params
            a, b, c, d = x - r, x + r, y - r, y + r
        return ParamGrid(a, b, c, d, n, n)

    def in_ball(self, x):
        return _in_ball(x, self.ball_center, self.ball_radius)

    def to_json(self):
        ball = None
        if self.ball_center is not None:
            bc = complex(self.ball_center)
            ball = {
                "center": "inf" if not np.isfinite(bc) else [bc.real, bc.imag],
                "radius": self.ball_radius,
            }
        return {"kind": self.kind, "params": list(self.params), "ball": ball}


def _in_ball(x, center, radius):
    if center is None:
        return np.ones(x.shape[:-1], dtype=bool)
    c = complex(center)
    if not np.isfinite(c):
        return np.abs(x[..., 1]) < radius * np.abs(x[..., 0])
    return np.abs(x[..., 0] - c * x[..., 1]) < radius * np.abs(x[..., 1])


def _window_table(windows):
    """Per-window map parameters ``(is_disc, p0, p1, p2, p3)`` and ball data."""
    W = len(windows)
    disc = np.zeros(W, dtype=bool)
    p = np.zeros((W, 4))
    bc = np.zeros(W, dtype=complex)
    br = np.zeros(W)
    mode = np.zeros(W, dtype=int)  # 0 all, 1 finite disc, 2 infinity
    for i, w in enumerate(windows):
        if w.kind == "disc":
            disc[i] = True
            p[i, :3] = w.params
        else:
            a, b, c, d = w.params
            p[i] = (a, b - a, c, d - c)
        if w.ball_center is not None:
            c = complex(w.ball_center)
            mode[i] = 2 if not np.isfinite(c) else 1
            bc[i] = c if np.isfinite(c) else 0.0
            br[i] = w.ball_radius
    return disc, p, bc, br, mode


def _map(table, win, s, t):
    """Unit-square coordinates to parameters and area Jacobian."""
    disc, p, _, _, _ = table
    q = p[win]
    dsc = disc[win]
    lam_r = q[:, 0] + s * q[:, 1] + 1j * (q[:, 2] + t * q[:, 3])
    jac_r = q[:, 1] * q[:, 3]
    lam_d = q[:, 0] + 1j * q[:, 1] + q[:, 2] * s * np.exp(2j * np.pi * t)
    jac_d = 2 * np.pi * q[:, 2] ** 2 * s
    return np.where(dsc, lam_d, lam_r), np.where(dsc, jac_d, jac_r)


def _ball_mask(table, win, x):
    _, _, bc, br, mode = table
    m = mode[win]
    c = bc[win]
    r = br[win]
    fin = np.abs(x[..., 0] - c * x[..., 1]) < r * np.abs(x[..., 1])
    inf = np.abs(x[..., 1]) < r * np.abs(x[..., 0])
    return np.where(m == 0, True, np.where(m == 1, fin, inf))


def _ball_cap(c, r, mode):
    """Unit vector of the spherical centre and angular radius of each ball's cap."""
    ac = np.abs(c)
    u = np.where(ac > 0, c / np.where(ac > 0, ac, 1.0), 1.0)
    lo = 2 * np.arctan(ac - r)
    hi = 2 * np.arctan(ac + r)
    alpha = 0.5 * (lo + hi)
    beta = 0.5 * (hi - lo)
    cen = np.stack([np.sin(alpha) * u.real, np.sin(alpha) * u.imag, -np.cos(alpha)], axis=-1)
    north = np.broadcast_to([0.0, 0.0, 1.0], cen.shape)
    inf = mode == 2
    with np.errstate(divide="ignore"):
        beta_inf = np.pi - 2 * np.arctan(1.0 / r)
    return np.where(inf[..., None], north, cen), np.where(inf, beta_inf, beta)


def _ball_gap(table, win, x, xp):
    """First-order parameter distance a track needs to reach the ball (inf inside or without a ball).

    Geodesic distance from ``[x]`` to the ball's spherical cap over the FS
    speed.  The affine version underestimates badly for escaping orbits.
    """
    _, _, bc, br, mode = table
    m = mode[win]
    cen, beta = _ball_cap(bc[win], br[win], m)
    x0, x1 = x[..., 0], x[..., 1]
    nx = np.abs(x0) ** 2 + np.abs(x1) ** 2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        w = x0 * np.conj(x1)
        dot = (2 * w.real * cen[..., 0] + 2 * w.imag * cen[..., 1]
               + (np.abs(x0) ** 2 - np.abs(x1) ** 2) * cen[..., 2]) / nx
        ang = np.arccos(np.clip(dot, -1.0, 1.0))
        g = 0.5 * (ang - beta) / pj.fs_speed(x, xp)
    g = np.where(m == 0, np.inf, g)
    g = np.where(np.isnan(g), 0.0, g)
    return np.where(g > 0, g, np.inf)


def _cell_diameter(table, win, s, h):
    disc, p, _, _, _ = table
    q = p[win]
    rect = h * np.hypot(q[:, 1], q[:, 3])
    polar = h * q[:, 2] * np.hypot(1.0, 2 * np.pi * s)
    return np.where(disc[win], polar, rect)


# ---------------------------------------------------------------------------
# adaptive quadrature
# ---------------------------------------------------------------------------

@dataclass
class QuadratureResult:
    area: np.ndarray            # (n_windows, n_terms) area(U & {gamma in B})
    speed: np.ndarray           # (n_windows, n_terms) int |gamma'|^2 over the same set
    quadrants: np.ndarray       # (n_windows, 4, n_terms) sub-window totals
    unresolved: np.ndarray      # (n_windows, n_terms) cells left with speed variation
    unresolved_edge: np.ndarray  # (n_windows, n_terms) cells left on the ball's edge
    n_points: int
    max_level: int

    @property
    def masses(self):
        return self.area + self.speed


def _speed_fd(values_fn, lam, h):
    """FS speed of ``lambda -> [x(lambda)]`` by central differences."""
    x0 = values_fn(lam)

    def align(y):
        # same projective point, lift rotated and scaled to match x0
        ip = np.sum(y * np.conj(x0), axis=-1, keepdims=True)
        ph = np.where(np.abs(ip) > 0, ip / np.abs(ip), 1.0)
        n0 = np.linalg.norm(x0, axis=-1, keepdims=True)
        return y / ph * n0 / np.linalg.norm(y, axis=-1, keepdims=True)

    dx = (align(values_fn(lam + h)) - align(values_fn(lam - h))) / (2 * h)
    return pj.fs_speed(x0, dx)


_OFF = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])


def adaptive_masses(windows, integrand, n_terms, n_base=8, max_level=MAX_LEVEL,
                    max_points=1 << 19, chunk=1 << 15):
    """Integrate over many windows with local adaptive midpoints.

    ``integrand(lam, win)`` returns ``(ind, speed2)`` or ``(ind, speed2, gap)``,
    each ``(n_terms, M)``: the ball indicator, ``ind * |gamma'|_FS^2`` and
    optionally the parameter distance the track needs to reach the ball.
    A cell none of whose children is in the ball, but which lies within
    reach of it, is refined like a varying cell.  Every cell is evaluated
    at its 2x2 child midpoints; when the children differ by more than 50% of
    their maximum for some term, they become cells themselves, up to
    ``max_level`` subdivisions and a total point budget.  Refinement only
    looks inside a cell, so a sub-window made of whole cells receives exactly
    the matching partial sum.
    """
    table = _window_table(windows)
    W = len(windows)
    area = np.zeros((W, n_terms))
    speed = np.zeros((W, n_terms))
    quads = np.zeros((W, 4, n_terms))
    unres = np.zeros((W, n_terms), dtype=int)
    unres_edge = np.zeros((W, n_terms), dtype=int)
    i, j = np.meshgrid(np.arange(n_base), np.arange(n_base), indexing="xy")
    h0 = 1.0 / n_base
    win = np.repeat(np.arange(W), n_base * n_base)
    s0 = np.tile(i.ravel() * h0, W)
    t0 = np.tile(j.ravel() * h0, W)
    h = np.full(win.size, h0)
    used = 0
    level = 0

    def evaluate(lam, w):
        ind = np.empty((n_terms, lam.size))
        sp = np.empty((n_terms, lam.size))
        gap = np.full((n_terms, lam.size), np.inf)
        for a in range(0, lam.size, chunk):
            out = integrand(lam[a : a + chunk], w[a : a + chunk])
            ind[:, a : a + chunk], sp[:, a : a + chunk] = out[0], out[1]
            if len(out) > 2:
                gap[:, a : a + chunk] = out[2]
        return ind, sp, gap

    while win.size:
        cs = (s0[:, None] + _OFF[None, :, 0] * h[:, None]).ravel()
        ct = (t0[:, None] + _OFF[None, :, 1] * h[:, None]).ravel()
        cw = np.repeat(win, 4)
        lam, jac = _map(table, cw, cs, ct)
        ind, sp, gap = evaluate(lam, cw)
        used += lam.size
        ind4 = ind.reshape(n_terms, -1, 4)
        g4 = ind4 + sp.reshape(n_terms, -1, 4)
        gmax = np.max(g4, axis=2)
        gmin = np.min(g4, axis=2)
        var = (gmax - gmin) > VARIATION * gmax          # (n_terms, cells)
        reach = _cell_diameter(table, win, s0 + 0.5 * h, h)
        near = np.min(gap.reshape(n_terms, -1, 4), axis=2) < reach[None, :]
        var |= near & (np.max(ind4, axis=2) == 0)
        edge = np.max(ind4, axis=2) != np.min(ind4, axis=2)
        flag = np.any(var, axis=0)
        wts = jac.reshape(-1, 4) * (h[:, None] ** 2) / 4.0
        quadrant = ((cs >= 0.5).astype(int) + 2 * (ct >= 0.5).astype(int)).reshape(-1, 4)
        if level >= max_level:
            refine = np.zeros_like(flag)
            left = flag
        else:
            refine = flag.copy()
            n_ref = int(np.count_nonzero(refine))
            if used + 16 * n_ref > max_points:
                room = max(0, (max_points - used) // 16)
                score = np.max((gmax - gmin) * np.sum(wts, axis=1)[None], axis=0)
                idx = np.nonzero(refine)[0]
                order = np.argsort(-score[idx], kind="stable")
                refine[:] = False
                refine[idx[order[:room]]] = True
            left = flag & ~refine
        if np.any(left):
            for n in range(n_terms):
                sel = left & var[n]
                unres[:, n] += np.bincount(win[sel & ~edge[n]], minlength=W)
                unres_edge[:, n] += np.bincount(win[sel & edge[n]], minlength=W)
        done = ~refine
        if np.any(done):
            wd = win[done]
            wq = np.broadcast_to(wd[:, None], (wd.size, 4))
            qd = quadrant[done]
            for n in range(n_terms):
                a_n = ind4[n][done] * wts[done]
                s_n = (g4[n][done] - ind4[n][done]) * wts[done]
                area[:, n] += np.bincount(wd, weights=a_n.sum(axis=1), minlength=W)
                speed[:, n] += np.bincount(wd, weights=s_n.sum(axis=1), minlength=W)
                tot = a_n + s_n
                for q in range(4):
                    m = qd == q
                    quads[:, q, n] += np.bincount(wq[m], weights=tot[m], minlength=W)
        r = np.nonzero(refine)[0]
        win = np.repeat(win[r], 4)
        s0 = (s0[r, None] + np.array([0, 0.5, 0, 0.5])[None] * h[r, None]).ravel()
        t0 = (t0[r, None] + np.array([0, 0, 0.5, 0.5])[None] * h[r, None]).ravel()
        h = np.repeat(h[r] / 2, 4)
        level += 1
    return QuadratureResult(area, speed, quads, unres, unres_edge, used, level)


# ---------------------------------------------------------------------------
# degree counting (argument principle)
# ---------------------------------------------------------------------------

def _ball_nodes(center, radius, n_r=4, n_t=8):
    """Projective quadrature nodes and FS-area weights for a phase ball."""
    if center is None:
        # spherical Fibonacci lattice, equal weights of total area pi
        n = 64
        k = np.arange(n) + 0.5
        cth = 1.0 - 2.0 * k / n
        phi = math.pi * (1.0 + math.sqrt(5.0)) * k
        th = np.arccos(cth)
        nodes = np.stack([np.cos(th / 2) * np.exp(1j * phi), np.sin(th / 2) + 0j], axis=-1)
        return nodes, np.full(n, math.pi / n)
    r = (np.arange(n_r) + 0.5) / n_r * radius
    t = (np.arange(n_t) + 0.5) / n_t * 2 * math.pi
    R, T = np.meshgrid(r, t, indexing="ij")
    u = (R * np.exp(1j * T)).ravel()
    wts = (R * (radius / n_r) * (2 * math.pi / n_t)).ravel()
    c = complex(center)
    if np.isfinite(c):
        w = c + u
        nodes = np.stack([w, np.ones_like(w)], axis=-1)
        dens = 1.0 / (1.0 + np.abs(w) ** 2) ** 2
    else:
        nodes = np.stack([np.ones_like(u), u], axis=-1)
        dens = 1.0 / (1.0 + np.abs(u) ** 2) ** 2
    return nodes, wts * dens


def _boundary(window, u):
    if window.kind == "disc":
        x, y, r = window.params
        return x + 1j * y + r * np.exp(2j * math.pi * u)
    a, b, c, d = window.params
    corners = np.array([a + 1j * c, b + 1j * c, b + 1j * d, a + 1j * d, a + 1j * c])
    s = 4.0 * u
    k = np.minimum(s.astype(int), 3)
    f = s - k
    return corners[k] + f * (corners[k + 1] - corners[k])


def _finite_markings(markings):
    """Markings of finite critical points (the one pinned at infinity has a constant track)."""
    return [mk for mk in markings if np.any(np.abs(pj.normalize(mk.values)[:, 1]) > 1e-12)]


def degree_speed_masses(family, markings, window, offset, terms, max_points=1 << 17,
                        n_init=256, max_rounds=40):
    """``int_B N_n(w) dA_FS(w)`` for the requested terms, by winding numbers.

    ``N_n(w)`` counts parameters in ``U`` where a track ``f^(offset+n)(c_j)``
    equals ``w``; it is the winding number of ``gamma - w`` along the
    boundary of ``U`` because the tracks of a polynomial family with finite
    marked points have no poles.  The boundary is bisected until every
    segment turns by less than a quarter turn around each node and moves by
    less than half its distance to the nearest node.  Returns ``(values,
    ok)`` arrays over ``terms``.
    """
    terms = [int(t) for t in terms]
    vals = np.zeros(len(terms))
    ok = np.zeros(len(terms), dtype=bool)
    if not (family.k == 1 and family.is_polynomial()):
        return vals, ok
    moving = _finite_markings(markings)
    if not moving:
        return vals, np.ones(len(terms), dtype=bool)
    nodes, wts = _ball_nodes(window.ball_center, window.ball_radius)
    u = (np.arange(n_init) + 0.5) / n_init
    n_top = max(terms)
    pending = set(range(len(terms)))
    for _ in range(max_rounds):
        lam = _boundary(window, u)
        nxt = np.roll(np.arange(u.size), -1)
        bad = np.zeros(u.size, dtype=bool)
        counts = {t: np.zeros(len(nodes)) for t in pending}
        term_bad = {t: False for t in pending}
        with np.errstate(over="ignore", invalid="ignore"):
            for mk in moving:
                x, _ = mk.evaluate(lam)
                for _o in range(offset):
                    x = family.step(lam, x)
                for n in range(n_top + 1):
                    hits = [t for t in pending if terms[t] == n]
                    if hits:
                        x = pj.rescale(x)
                        phi = (x[:, None, 0] * nodes[None, :, 1] - x[:, None, 1] * nodes[None, :, 0])
                        phi = phi * np.conj(x[:, None, 1])
                        ang = np.angle(phi)
                        dang = np.angle(np.exp(1j * (ang[nxt] - ang)))
                        dist = np.min(pj.chordal(x[:, None, :], nodes[None, :, :]), axis=1)
                        step = pj.chordal(x, x[nxt])
                        seg_bad = np.any(np.abs(dang) > math.pi / 2, axis=1) | (step > 0.5 * dist)
                        wind = np.rint(np.sum(dang, axis=0) / (2 * math.pi))
                        for t in hits:
                            counts[t] += mk.multiplicity * wind
                            term_bad[t] = term_bad[t] or bool(np.any(seg_bad))
                        bad |= seg_bad
                    if n < n_top:
                        x = family.step(lam, x)
        for t in list(pending):
            if not term_bad[t]:
                if np.all(counts[t] >= 0):
                    vals[t] = fsum(counts[t] * wts)
                    ok[t] = True
                pending.discard(t)
        if not pending:
            break
        # bisect offending segments (segments shorter than 1e-13 are accepted)
        seglen = (u[nxt] - u) % 1.0
        bad &= seglen > 1e-13
        if not np.any(bad) or u.size + np.count_nonzero(bad) > max_points:
            break
        mid = (u[bad] + 0.5 * seglen[bad]) % 1.0
        u = np.sort(np.concatenate([u, mid]))
    return vals, ok


# ---------------------------------------------------------------------------
# tracks and graph masses
# ---------------------------------------------------------------------------

class _PostcriticalEvaluator:
    """``lambda -> f_lambda^n(c(lambda))`` with its lifted lambda-derivative."""

    def __init__(self, family, marking, n):
        self.family = family
        self.marking = marking
        self.n = n

    def __call__(self, lam):
        x, xp = self.marking.evaluate(lam)
        for _ in range(self.n):
            x, xp = self.family.step(lam, x, xp)
        return x, xp


def postcritical_track(family, marking, n):
    """MotionTrack of ``f^n`` applied to a critical marking."""
    ev = _PostcriticalEvaluator(family, marking, n)
    vals, ders = ev(marking.base_grid.flat())
    return MotionTrack(marking.base_grid, vals, "postcritical", ders, ev,
                       marking.multiplicity, f"f^{n}({marking.label})")


@dataclass(frozen=True)
class GraphMass:
    value: float
    unresolved: int
    n_points: int

    def __float__(self):
        return self.value


def graph_mass(track, window, n_base=32, max_level=MAX_LEVEL, derivative="analytic",
               fd_step=1e-6, max_points=1 << 20):
    """Mass of the graph of ``track`` in ``window`` against ``omega_M + omega_FS``.

    ``area(U & {gamma in B}) + int |gamma'|_FS^2 dA`` by adaptive midpoints.
    With ``derivative="fd"`` the speed comes from central differences of the
    track values instead of the propagated tangent.
    """
    if derivative not in ("analytic", "fd"):
        raise ValueError("derivative must be 'analytic' or 'fd'")

    def integrand(lam, win):
        x, xp = track.evaluate(lam)
        if derivative == "fd":
            sp = _speed_fd(lambda l: track.evaluate(l)[0], lam, fd_step)
        else:
            sp = pj.fs_speed(x, xp)
        ind = window.in_ball(x).astype(float)
        return ind[None], (ind * sp**2)[None]

    res = adaptive_masses([window], integrand, 1, n_base, max_level, max_points)
    return GraphMass(float(res.masses[0, 0]), int(res.unresolved[0, 0]), res.n_points)


def _sequence_integrand(family, markings, offset, n_terms, table):
    """Integrand for the tracks ``f^(offset+n)(c_j)``, ``n < n_terms``."""
    big = np.finfo(float).max / 1e6

    def integrand(lam, win):
        ind = np.zeros((n_terms, lam.size))
        sp = np.zeros((n_terms, lam.size))
        gap = np.full((n_terms, lam.size), np.inf)
        with np.errstate(over="ignore", invalid="ignore"):
            for mk in markings:
                x, xp = mk.evaluate(lam)
                for _ in range(offset):
                    x, xp = family.step(lam, x, xp)
                for n in range(n_terms):
                    inb = _ball_mask(table, win, x)
                    s2 = pj.fs_speed(x, xp) ** 2
                    s2 = np.where(np.isfinite(s2), np.minimum(s2, big), big)
                    ind[n] += mk.multiplicity * inb
                    sp[n] += mk.multiplicity * np.where(inb, s2, 0.0)
                    gap[n] = np.minimum(gap[n], _ball_gap(table, win, x, xp))
                    if n + 1 < n_terms:
                        x, xp = family.step(lam, x, xp)
        return ind, sp, gap

    return integrand


def _markings_for(family, windows, markings, n_grid=16):
    if markings is not None:
        return markings
    if family.k != 1:
        raise FamilyError("post-critical masses are implemented for k = 1")
    gs = [w.bounding_grid(1) for w in windows]
    return critical_marking(family, ParamGrid(
        min(g.re0 for g in gs), max(g.re1 for g in gs),
        min(g.im0 for g in gs), max(g.im1 for g in gs), n_grid, n_grid))


@dataclass
class TrackMasses:
    masses: np.ndarray          # (n_windows, n_terms)
    quadrants: np.ndarray
    method: np.ndarray          # 0 midpoint, 1 degree count, 2 unresolved
    unresolved_cells: np.ndarray
    n_points: int


def track_masses(family, windows, n_terms, offset=0, markings=None, n_base=8,
                 max_level=MAX_LEVEL, max_points=1 << 19, degree_fallback=True,
                 degree_points=1 << 17):
    """Masses of ``sum_j [graph of f^(offset+n)(c_j)]`` in each window, ``n < n_terms``.

    Terms whose speed integrand stays unresolved after refinement are
    recomputed by degree counting when ``degree_fallback`` is set (polynomial
    families); otherwise, or when that fails too, they are marked unresolved.
    """
    markings = _markings_for(family, windows, markings)
    table = _window_table(windows)
    integ = _sequence_integrand(family, markings, offset, n_terms, table)
    res = adaptive_masses(windows, integ, n_terms, n_base, max_level, max_points)
    # once a window shows unresolved variation its tracks are not a normal
    # family there; later terms can then hide their mass between samples
    bad = res.unresolved > 0
    method = np.where(np.cumsum(bad, axis=1) > 0, 2, 0)
    speed = res.speed.copy()
    if degree_fallback:
        for w in range(len(windows)):
            terms = np.nonzero(method[w] == 2)[0]
            if terms.size == 0:
                continue
            v, ok = degree_speed_masses(family, markings, windows[w], offset, terms,
                                        max_points=degree_points)
            speed[w, terms[ok]] = v[ok]
            method[w, terms[ok]] = 1
    return TrackMasses(res.area + speed, res.quadrants, method, res.unresolved, res.n_points)


# ---------------------------------------------------------------------------
# series and verdicts
# ---------------------------------------------------------------------------

@dataclass
class MassSeries:
    window: Window
    per_n: np.ndarray
    partial_sums: np.ndarray
    verdict: str
    tail_bound: float
    rate: float
    residual: float
    method: np.ndarray = field(default=None, repr=False)
    quadrant_per_n: np.ndarray = field(default=None, repr=False)

    @property
    def unresolved_terms(self):
        if self.method is None:
            return []
        return [int(n) for n in np.nonzero(self.method == 2)[0]]

    def to_json(self):
        names = {0: "midpoint", 1: "degree", 2: "unresolved"}
        return {
            "window": self.window.to_json(),
            "per_n": [_finite(v) for v in self.per_n],
            "partial_sums": [_finite(v) for v in self.partial_sums],
            "verdict": self.verdict,
            "tail_bound": _finite(self.tail_bound),
            "fit": {"rate": _finite(self.rate), "residual": _finite(self.residual)},
            "method": [names[int(m)] for m in (self.method if self.method is not None
                                               else np.zeros(len(self.per_n)))],
        }


def _finite(v):
    return float(v) if np.isfinite(v) else None


def partial_sums(per_n):
    return np.array([fsum(per_n[: i + 1]) for i in range(len(per_n))])


def _resolved_prefix(n_terms, unresolved):
    if unresolved is None:
        return n_terms
    bad = np.nonzero(np.asarray(unresolved, dtype=bool))[0]
    return int(bad[0]) if bad.size else n_terms


def series_verdict(per_n, unresolved=None, eps_fit=EPS_FIT, tail_rel=TAIL_REL):
    """``(verdict, tail_bound, rate, residual)`` for a mass series.

    The fit uses the last half of the resolved prefix of ``per_n`` (terms
    before the first unresolved one).  Slope at least ``-eps_fit`` means
    diverging.  Converged needs every term resolved and a geometric ratio
    ``q < 1`` whose tail bound ``per_N q / (1 - q)`` is at most ``tail_rel``
    times the partial sum; an identically zero resolved tail has bound 0.
    Anything else is inconclusive.
    """
    per_n = np.asarray(per_n, dtype=float)
    N = len(per_n)
    M = _resolved_prefix(N, unresolved)
    total = fsum(per_n[:M])
    complete = M == N
    if M < 3:
        return "inconclusive", math.inf, math.nan, math.nan
    tail = per_n[M // 2 : M]
    if np.all(tail <= 1e-15 * max(total, 1.0)):
        return ("converged" if complete else "inconclusive"), 0.0, -math.inf, 0.0
    floor = np.min(tail[tail > 0]) * 1e-6
    rate, _, resid = linear_fit(np.arange(M // 2, M), np.log(np.maximum(tail, floor)))
    if rate >= -eps_fit:
        return "diverging", math.inf, rate, resid
    q = math.exp(rate)
    bound = per_n[M - 1] * q / (1.0 - q)
    if complete and bound <= tail_rel * total:
        return "converged", bound, rate, resid
    return "inconclusive", bound, rate, resid


def _make_series(window, raw, d, method=None, quad=None):
    n = np.arange(raw.size)
    scale = float(d) ** (-n)
    per = raw * scale
    unres = None if method is None else method == 2
    verdict, bound, rate, resid = series_verdict(per, unres)
    qp = None if quad is None else quad * scale[None, :]
    return MassSeries(window, per, partial_sums(per), verdict, bound, rate, resid, method, qp)


def ramification_series(family, markings, window, N_max, n_base=16, max_level=MAX_LEVEL,
                        max_points=1 << 20, degree_fallback=True):
    """``per_n = d^-n sum_j mass(f^n(f(c_j)))`` for ``n = 0..N_max`` and its verdict."""
    return ramification_batch(family, markings, [window], N_max, n_base, max_level,
                              max_points, degree_fallback)[0]


def ramification_batch(family, markings, windows, N_max, n_base=8, max_level=MAX_LEVEL,
                       max_points=1 << 20, degree_fallback=True):
    res = track_masses(family, windows, N_max + 1, 1, markings, n_base, max_level,
                       max_points, degree_fallback)
    d = family.d ** family.k
    return [
        _make_series(w, res.masses[i], d, res.method[i], res.quadrants[i])
        for i, w in enumerate(windows)
    ]


@dataclass
class GrowthFit:
    rate: float
    log_amplitude: float
    residual: float
    masses: np.ndarray
    stable: bool
    method: np.ndarray = field(default=None, repr=False)

    def to_json(self):
        names = {0: "midpoint", 1: "degree", 2: "unresolved"}
        return {
            "rate": _finite(self.rate), "log_amplitude": _finite(self.log_amplitude),
            "residual": _finite(self.residual), "masses": [_finite(m) for m in self.masses],
            "stable": bool(self.stable),
            "method": [names[int(m)] for m in self.method],
        }


def growth_fit(masses, method=None, eps_fit=EPS_FIT):
    """Least-squares ``log mass_n = log A + rho n`` over the last half of the resolved prefix.

    Stable means ``rho <= eps_fit`` with every term resolved.
    """
    masses = np.asarray(masses, dtype=float)
    method = np.zeros(masses.size, dtype=int) if method is None else np.asarray(method)
    M = _resolved_prefix(masses.size, method == 2)
    if M < 3:
        return GrowthFit(math.nan, math.nan, math.nan, masses, False, method)
    n = np.arange(M // 2, M)
    rate, amp, resid = linear_fit(n, np.log(np.maximum(masses[M // 2 : M], 1e-300)))
    stable = rate <= eps_fit and M == masses.size
    return GrowthFit(rate, amp, resid, masses, bool(stable), method)


def mass_growth_rate(family, U, N_max, markings=None, n_base=16, max_level=MAX_LEVEL,
                     max_points=1 << 20, degree_fallback=True):
    """Fit ``mass_n ~ A exp(rho n)`` for ``mass_n = sum_j mass(f^n(c_j))`` over ``U x P^1``."""
    return growth_batch(family, [U], N_max, markings, n_base, max_level, max_points,
                        degree_fallback)[0]


def growth_batch(family, windows, N_max, markings=None, n_base=8, max_level=MAX_LEVEL,
                 max_points=1 << 20, degree_fallback=True):
    windows = [Window(w.kind, w.params) for w in windows]
    res = track_masses(family, windows, N_max + 1, 0, markings, n_base, max_level,
                       max_points, degree_fallback)
    return [growth_fit(res.masses[i], res.method[i]) for i in range(len(windows))]


# ---------------------------------------------------------------------------
# convergence maps
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceMap:
    grid: ParamGrid
    balls: list
    series: list                # [ball][cell] MassSeries
    verdicts: np.ndarray        # (n_balls, ny, nx) strings

    def converged(self, ball=0):
        return self.verdicts[ball] == "converged"

    def nested_violations(self):
        """Windows whose verdict is converged while a quadrant's is not."""
        bad = []
        for b, row in enumerate(self.series):
            for i, s in enumerate(row):
                if s.verdict != "converged" or s.quadrant_per_n is None:
                    continue
                if s.method is not None and np.any(s.method != 0):
                    continue  # quadrant sums exist only for midpoint terms
                for q in range(4):
                    v = series_verdict(s.quadrant_per_n[q])[0]
                    if v != "converged":
                        bad.append((b, i, q, v))
        return bad

    def to_json(self):
        return {
            "grid": _grid_json(self.grid),
            "balls": [_ball_json(b) for b in self.balls],
            "windows": [[s.to_json() for s in row] for row in self.series],
        }


def _grid_json(g):
    return {"re0": g.re0, "re1": g.re1, "im0": g.im0, "im1": g.im1, "nx": g.nx, "ny": g.ny}


def _ball_json(b):
    if b is None:
        return None
    c, r = b
    c = complex(c)
    return {"center": "inf" if not np.isfinite(c) else [c.real, c.imag], "radius": r}


def convergence_map(family, grid, balls, N_max, markings=None, n_base=4,
                    max_level=MAX_LEVEL, max_points=1 << 21, degree_fallback=False):
    """Ramification verdicts for every cell of ``grid`` times every phase ball."""
    if markings is None:
        markings = critical_marking(family, grid)
    series = []
    verdicts = np.empty((len(balls), grid.ny, grid.nx), dtype=object)
    for b, ball in enumerate(balls):
        wins = [Window.cell(grid, i, ball) for i in range(grid.size)]
        row = ramification_batch(family, markings, wins, N_max, n_base, max_level,
                                 max_points, degree_fallback)
        series.append(row)
        verdicts[b] = np.array([s.verdict for s in row], dtype=object).reshape(grid.ny, grid.nx)
    return ConvergenceMap(grid, list(balls), series, verdicts)


# ---------------------------------------------------------------------------
# k = 2 Monte Carlo masses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloMass:
    n: int
    estimate: float
    stderr: float
    normalized: float
    normalized_stderr: float
    n_samples: int


def _skew_components(family, lam):
    """Critical components of a skew product as parametrized lines.

    Returns a list of ``(base, direction, multiplicity)``: the line
    ``w -> base + w * direction``.  Only the case where ``dq/dy`` is a pure
    power of ``y`` is supported.
    """
    if family.k != 2:
        raise FamilyError("montecarlo_mass_k2 needs k = 2")
    e = family.exponents
    c = family.coeffs_at(complex(lam))
    d = family.d
    # p(x, t) and t^d must not involve y
    if np.any(c[0][e[:, 1] > 0]) or np.any(c[2][e[:, 1] > 0]):
        raise FamilyError("not a skew product: first or last component depends on y")
    # dq/dy = const * y^(d-1)
    dq = c[1][(e[:, 1] > 0)]
    ey = e[e[:, 1] > 0]
    pure = (ey[:, 1] == d)
    if np.any(dq[~pure]) or not np.any(dq[pure]):
        raise FamilyError("component parametrization failed: dq/dy is not a pure power of y")
    comps = [(np.array([0, 0, 1], complex), np.array([1, 0, 0], complex), d - 1)]
    # dp/dx as a binary form in (x, t)
    pform = np.zeros(d + 1, dtype=complex)
    for m, (a, _, b) in enumerate(e):
        if e[m, 1] == 0:
            pform[d - a] += c[0][m]
    dp = pj.form_dz(pform)
    if not np.any(dp):
        raise FamilyError("component parametrization failed: dp/dx vanishes identically")
    for root in pj.binary_form_roots(dp):
        comps.append((np.array([root[0], 0, root[1]]), np.array([0, 1, 0], complex), 1))
    return comps


def _param_lambda(U, u1, u2):
    if U.kind == "disc":
        x, y, r = U.params
        return x + 1j * y + r * np.sqrt(u1) * np.exp(2j * np.pi * u2)
    a, b, c, d = U.params
    return a + (b - a) * u1 + 1j * (c + (d - c) * u2)


def montecarlo_mass_k2(family, n, U, n_samples=20000, seed=0):
    """FS area of ``f^n`` of the critical components, averaged over ``U``.

    Points of each component are drawn from the FS-uniform law of the line
    (density ``1/(pi (1+|w|^2)^2)``) and weighted by the pulled-back area
    density ``(|F|^2 |F'|^2 - |<F, F'>|^2) / |F|^4``.
    """
    rng = substream(seed, 0, int(n))
    u = rng.random((n_samples, 4))
    lam = _param_lambda(U, u[:, 0], u[:, 1])
    # FS-uniform w on a line: |w|^2 = u/(1-u)
    rad = np.sqrt(u[:, 2] / (1.0 - u[:, 2]))
    w = rad * np.exp(2j * np.pi * u[:, 3])
    pdf = 1.0 / (math.pi * (1.0 + np.abs(w) ** 2) ** 2)
    # components may depend on lambda; group by unique structure at each sample
    comps0 = _skew_components(family, complex(U.center))
    p_moves = bool(np.any(family.coeffs[0][:, 1:]))
    vals = np.zeros(n_samples)
    for ci in range(len(comps0)):
        base = np.empty((n_samples, 3), dtype=complex)
        dirn = np.empty((n_samples, 3), dtype=complex)
        mult = comps0[ci][2]
        if ci == 0 or not p_moves:
            base[:] = comps0[ci][0]
            dirn[:] = comps0[ci][1]
        else:
            for s in range(n_samples):
                cs = _skew_components(family, lam[s])
                base[s], dirn[s] = cs[ci][0], cs[ci][1]
        X = base + w[:, None] * dirn
        T = np.broadcast_to(dirn, X.shape).copy()
        for _ in range(n):
            f, jac, _ = family.lift_jet(lam, X)
            T = np.einsum("...ij,...j->...i", jac, T)
            X, T = pj.rescale(f, T)
        nx2 = np.sum(np.abs(X) ** 2, axis=1)
        nt2 = np.sum(np.abs(T) ** 2, axis=1)
        ip = np.abs(np.sum(np.conj(X) * T, axis=1)) ** 2
        dens = (nx2 * nt2 - ip) / nx2**2
        vals += mult * dens / pdf
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
    norm = float(family.d) ** ((family.k - 1) * n)
    return MonteCarloMass(int(n), est, se, est / norm, se / norm, int(n_samples))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_series_json(series, path, meta=None):
    obj = dict(meta or {})
    obj["series"] = [s.to_json() for s in series]
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_series_csv(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "n", "per_n", "partial_sum"])
        for i, s in enumerate(series):
            for n, (p, ps) in enumerate(zip(s.per_n, s.partial_sums)):
                w.writerow([i, n, repr(float(p)), repr(float(ps))])
