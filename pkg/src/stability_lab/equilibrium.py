"""Green function, equilibrium-measure sampling and Birkhoff Lyapunov averages."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import projective as pj
from .family import DegenerateParameterError, FamilyError, log_fs_jacobian
from .stats import substream

JAC_CLIP = -40.0
NEAR_CRITICAL = 1e-12


@dataclass(frozen=True)
class GreenValue:
    value: float
    depth: int
    truncation_bound: float

    def __float__(self):
        return self.value


def _affine_lift(x):
    """Lift with last coordinate 1 where possible (max-normalized at infinity)."""
    x = np.asarray(x, dtype=complex)
    last = x[..., -1:]
    big = np.max(np.abs(x), axis=-1, keepdims=True)
    ok = np.abs(last) > 1e-300 * np.maximum(big, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        hat = np.where(ok, x / np.where(ok, last, 1.0), x / np.where(big > 0, big, 1.0))
    return hat


def escape_rate(family, lam, x, depth, normalize_poly=None):
    """Vectorized lift escape rate and truncation bound.

    ``lam`` and the leading axes of ``x`` broadcast.  For polynomial families
    the lift is divided by the leading coefficient of ``Q`` so that the result
    is the usual Green function of the affine polynomial (``>= 0``).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    lam = np.asarray(lam, dtype=complex)
    if normalize_poly is None:
        normalize_poly = family.k == 1 and family.is_polynomial()
    scale = 1.0 / family.polynomial_scale(lam) if normalize_poly else None
    hat = _affine_lift(x)
    s0 = np.max(np.abs(hat), axis=-1)
    g = np.log(s0)
    xj = hat / s0[..., None]
    d = float(family.d)
    last = np.zeros_like(g)
    prev = np.zeros_like(g)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for j in range(depth):
            y = family.lift(lam, xj)
            if scale is not None:
                y = y * np.asarray(scale)[..., None]
            s = np.max(np.abs(y), axis=-1)
            if np.any(s == 0):
                raise FamilyError("lift vanished: degenerate parameter")
            ls = np.log(s)
            g = g + ls * d ** (-(j + 1))
            prev, last = last, ls
            xj = y / s[..., None]
    c = np.maximum(np.abs(last), np.abs(prev))
    bound = c * d ** (-depth) / (d - 1.0)
    return g, bound


def green(family, lam, z, depth=60):
    """Escape rate ``d^-n log|F^n(z_hat)|`` at a single point."""
    x = z.array if isinstance(z, pj.ProjPoint) else np.asarray(z, dtype=complex)
    if x.ndim == 0:
        x = pj.lift_affine(x)
    g, b = escape_rate(family, lam, x, depth)
    return GreenValue(float(g), int(depth), float(b))


# ---------------------------------------------------------------------------
# equilibrium sampling
# ---------------------------------------------------------------------------

@dataclass
class MeasureSample:
    lam: complex
    coords: np.ndarray          # (N, 2) homogeneous, max-normalized
    provenance: dict
    seed_point: np.ndarray = field(default=None)

    @property
    def size(self):
        return self.coords.shape[0]

    @property
    def weights(self):
        return np.full(self.size, 1.0 / self.size)

    @property
    def points(self):
        return [pj.ProjPoint(c) for c in self.coords]

    def affine(self):
        return pj.affine(self.coords)


def fs_uniform(rng, n):
    """``n`` points of P^1 distributed by the normalized Fubini-Study area."""
    g = rng.normal(size=(n, 2, 2))
    return pj.normalize(g[..., 0] + 1j * g[..., 1])


def preimages(family, lam, y):
    """All ``d`` preimages of each point ``y`` (shape ``(N, 2)``) -> ``(N, d, 2)``."""
    P, Q = family.forms(complex(lam))
    fib = y[:, 1:2] * P[None, :] - y[:, 0:1] * Q[None, :]
    return pj.binary_form_roots(fib)


def _is_generic_seed(family, lam, x, depth=40):
    if family.is_polynomial():
        return escape_rate(family, lam, x, depth)[0] > 1e-6
    # exceptional points have at most two points in their backward orbit
    pre = preimages(family, lam, x[None, :])[0]
    pre2 = preimages(family, lam, pre).reshape(-1, 2)
    pts = np.concatenate([pre, pre2])
    dist = pj.chordal(pts[:, None, :], pts[None, :, :])
    distinct = []
    for i in range(len(pts)):
        if all(dist[i, j] > 1e-6 for j in distinct):
            distinct.append(i)
    return len(distinct) >= 3


def choose_seed(family, lam, seed, tries=64):
    rng = substream(seed, 0)
    cand = fs_uniform(rng, tries)
    for x in cand:
        if _is_generic_seed(family, lam, x):
            return x
    raise FamilyError("no generic seed point found (exceptional set too large?)")


def _random_backward(family, lam, x0, depth, seed, tag, start=0):
    """Random backward paths; path ``i`` uses substream ``(tag, start + i)``."""
    n = x0.shape[0]
    d = family.d
    u = np.empty((n, depth))
    for i in range(n):
        u[i] = substream(seed, tag, start + i).random(depth)
    choice = np.minimum((u * d).astype(int), d - 1)
    return choice


def sample_equilibrium(family, lam, n_points, depth=30, seed=0, seed_point=None):
    """Inverse-iteration sample of the equilibrium measure at ``lam``.

    Each point is obtained from the seed by ``depth`` preimage choices, uniform
    among the ``d`` roots counted with multiplicity.  Choices for point ``i``
    come from their own substream, so chunks may be generated independently.
    """
    if family.k != 1:
        raise FamilyError("equilibrium sampling is only implemented for k = 1")
    lam = complex(lam)
    if family.nondegeneracy(lam) < 1e-13:
        raise DegenerateParameterError(f"P and Q share a root at lambda={lam!r}")
    if seed_point is None:
        x0 = choose_seed(family, lam, seed)
    else:
        x0 = pj.normalize(np.asarray(getattr(seed_point, "array", seed_point), dtype=complex))
    choice = _random_backward(family, lam, np.zeros((n_points, 2)), depth, seed, 1)
    y = np.repeat(x0[None, :], n_points, axis=0)
    rows = np.arange(n_points)
    for j in range(depth):
        pre = preimages(family, lam, y)
        y = pre[rows, choice[:, j]]
    prov = {"method": "inverse_iteration", "depth": int(depth), "seed": int(seed)}
    return MeasureSample(lam, pj.normalize(y), prov, x0)


def fiber_residual(family, sample):
    """Chordal distance between ``f^depth`` of each sample point and the seed."""
    x = sample.coords
    for _ in range(sample.provenance["depth"]):
        x = family.step(sample.lam, x)
    return pj.chordal(x, sample.seed_point[None, :])


def push_forward(family, sample):
    coords = pj.normalize(family.step(sample.lam, sample.coords))
    prov = dict(sample.provenance, pushed=sample.provenance.get("pushed", 0) + 1)
    return MeasureSample(sample.lam, coords, prov, sample.seed_point)


# ---------------------------------------------------------------------------
# Birkhoff averages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BirkhoffEstimate:
    value: float
    stderr: float
    n_points: int
    n_iter: int
    n_clipped: int
    near_critical: bool
    per_point: np.ndarray = field(repr=False, default=None)

    def __float__(self):
        return self.value


def birkhoff_lyapunov(family, lam, sample, n_iter=200, seed=None):
    """Average of ``log|jac|`` over orbit segments of length ``n_iter``.

    Forward iteration on the Julia set is numerically unstable, so each sample
    point is extended by ``n_iter`` further random preimages; read backwards,
    that chain is a forward orbit segment of a point that is again distributed
    by the equilibrium measure, and the sum is taken along it.
    """
    lam = complex(lam)
    if abs(lam - complex(sample.lam)) > 1e-12:
        raise ValueError("sample was drawn at a different parameter")
    if seed is None:
        seed = int(sample.provenance.get("seed", 0))
    n = sample.size
    crit = family.critical_points(lam)
    choice = _random_backward(family, lam, sample.coords, n_iter, seed, 2)
    y = sample.coords
    rows = np.arange(n)
    total = np.zeros(n)
    n_clip = 0
    near = False
    for j in range(n_iter):
        y = preimages(family, lam, y)[rows, choice[:, j]]
        lj = log_fs_jacobian(family, lam, y)
        low = ~(lj > JAC_CLIP)
        n_clip += int(np.count_nonzero(low))
        lj = np.where(low, JAC_CLIP, lj)
        dc = np.min(pj.chordal(y[:, None, :], crit[None, :, :]), axis=1)
        near = near or bool(np.any(dc < NEAR_CRITICAL))
        total += lj
    per = total / n_iter
    val = math.fsum(per.tolist()) / n
    se = float(np.std(per, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return BirkhoffEstimate(val, se, n, int(n_iter), n_clip, near, per)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def sample_rows(sample):
    """Rows ``(index, re, im, chart)`` using the chart where the coordinate is bounded."""
    rows = []
    for i, (a, b) in enumerate(sample.coords):
        if abs(b) >= abs(a):
            v, chart = a / b, "z"
        else:
            v, chart = b / a, "1/z"
        rows.append((i, float(v.real), float(v.imag), chart))
    return rows


def write_sample_csv(sample, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "re", "im", "chart"])
        for r in sample_rows(sample):
            w.writerow([r[0], repr(r[1]), repr(r[2]), r[3]])
