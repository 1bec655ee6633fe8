"""Points of projective space and batched polynomial root finding.

Homogeneous coordinates are stored as complex arrays whose last axis has
length k + 1.  The last coordinate is the homogenizing one, so the standard
affine chart of P^1 is ``z = x[0] / x[1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

POINT_TOL = 1e-9


def normalize(x):
    """Divide by the largest-modulus coordinate (that coordinate becomes 1)."""
    x = np.asarray(x, dtype=complex)
    idx = np.argmax(np.abs(x), axis=-1)
    piv = np.take_along_axis(x, idx[..., None], axis=-1)
    return x / piv


def rescale(x, *others):
    """Divide ``x`` (and companion arrays) by the positive real ``max|x_i|``.

    The phase is kept, so holomorphic dependence on a parameter survives up to
    a positive real factor (arguments and winding numbers are unaffected).
    """
    s = np.max(np.abs(x), axis=-1, keepdims=True)
    s = np.where(s > 0, s, 1.0)
    if others:
        return (x / s,) + tuple(o / s for o in others)
    return x / s


def chordal(x, y):
    """Chordal (Fubini-Study sine) distance between projective points.

    Uses the Lagrange identity ``|x|^2 |y|^2 - |<x,y>|^2 = sum_{i<j} |x_i y_j - x_j y_i|^2``
    so small distances keep full relative precision.
    """
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    x = x / np.max(np.abs(x), axis=-1, keepdims=True)
    y = y / np.max(np.abs(y), axis=-1, keepdims=True)
    nx = np.sum(np.abs(x) ** 2, axis=-1)
    ny = np.sum(np.abs(y) ** 2, axis=-1)
    n = x.shape[-1]
    acc = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            acc = acc + np.abs(x[..., i] * y[..., j] - x[..., j] * y[..., i]) ** 2
    return np.sqrt(acc / (nx * ny))


def affine(x):
    """Affine coordinates in the chart ``x[-1] = 1`` (inf where undefined)."""
    x = np.asarray(x, dtype=complex)
    last = x[..., -1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x[..., :-1] / last
    out = np.where(np.abs(last) > 0, out, np.inf)
    if out.shape[-1] == 1:
        return out[..., 0]
    return out


def lift_affine(z):
    """Homogeneous coordinates ``(z, 1)`` of affine points of P^1."""
    z = np.asarray(z, dtype=complex)
    return np.stack([z, np.ones_like(z)], axis=-1)


def fs_speed(x, xp):
    """FS norm of the tangent vector ``xp`` at the point ``[x]`` of P^1.

    ``|x0 x1' - x1 x0'| / |x|^2``; in the affine chart this is
    ``|z'| / (1 + |z|^2)``.
    """
    wedge = x[..., 0] * xp[..., 1] - x[..., 1] * xp[..., 0]
    return np.abs(wedge) / np.sum(np.abs(x) ** 2, axis=-1)


@dataclass(frozen=True, eq=False)
class ProjPoint:
    """A point of P^k, stored with its largest coordinate equal to 1."""

    coords: tuple

    def __init__(self, coords):
        arr = normalize(np.asarray(coords, dtype=complex))
        object.__setattr__(self, "coords", tuple(complex(c) for c in arr))

    @classmethod
    def from_affine(cls, *z):
        return cls(list(z) + [1.0])

    @property
    def array(self):
        return np.array(self.coords, dtype=complex)

    @property
    def k(self):
        return len(self.coords) - 1

    def affine(self):
        return affine(self.array)

    def distance(self, other):
        return float(chordal(self.array, _arr(other)))

    def __eq__(self, other):
        if not isinstance(other, ProjPoint) or other.k != self.k:
            return NotImplemented
        return self.distance(other) < POINT_TOL

    def __hash__(self):
        return hash(self.k)

    def __repr__(self):
        inner = ":".join(f"{c:.6g}" for c in self.coords)
        return f"ProjPoint[{inner}]"


def _arr(p):
    return p.array if isinstance(p, ProjPoint) else np.asarray(p, dtype=complex)


# ---------------------------------------------------------------------------
# roots of binary forms
# ---------------------------------------------------------------------------

def _companion_roots(a):
    """Roots of polynomials with coefficient rows ``a`` (leading first, nonzero)."""
    n = a.shape[-1] - 1
    if n == 0:
        return np.zeros(a.shape[:-1] + (0,), dtype=complex)
    b = a[:, 1:] / a[:, :1]
    if n == 1:
        return -b
    comp = np.zeros((a.shape[0], n, n), dtype=complex)
    comp[:, 0, :] = -b
    idx = np.arange(n - 1)
    comp[:, idx + 1, idx] = 1.0
    return np.linalg.eigvals(comp)


def _polish(a, z, steps=2):
    """A few guarded Newton steps on each root (rows of ``a`` are polynomials)."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _polish_steps(a, z, steps)


def _polish_steps(a, z, steps):
    n = a.shape[-1] - 1
    if n == 0:
        return z
    da = a[:, :-1] * np.arange(n, 0, -1)
    # clustered roots are left alone: Newton moves them by rounding noise
    gap = np.abs(z[:, :, None] - z[:, None, :])
    gap[:, np.arange(n), np.arange(n)] = np.inf
    gap = gap.min(axis=2)
    for _ in range(steps):
        p = np.zeros_like(z)
        dp = np.zeros_like(z)
        bound = np.zeros(z.shape)
        az = np.abs(z)
        for j in range(n + 1):
            p = p * z + a[:, j : j + 1]
            bound = bound * az + np.abs(a[:, j : j + 1])
        for j in range(n):
            dp = dp * z + da[:, j : j + 1]
        ok = np.abs(dp) > 0
        step = np.where(ok, p / np.where(ok, dp, 1.0), 0.0)
        cand = z - step
        pc = np.zeros_like(z)
        for j in range(n + 1):
            pc = pc * cand + a[:, j : j + 1]
        # at an ill-conditioned root a rounding-level residual only steers Newton by noise
        noisy = ((np.abs(p) <= 8 * n * np.finfo(float).eps * bound)
                 & (bound > 1e3 * np.abs(dp) * np.maximum(az, 1.0)))
        better = (np.isfinite(cand) & (np.abs(pc) <= np.abs(p)) & (np.abs(step) < 0.01 * gap)
                  & ~noisy)
        z = np.where(better, cand, z)
    return z


def binary_form_roots(coeffs, polish=True):
    """All roots on P^1 of binary forms, with multiplicity.

    ``coeffs[..., i]`` is the coefficient of ``z^(d-i) w^i``.  Returns an
    array of shape ``coeffs.shape[:-1] + (d, 2)`` of normalized projective
    roots.  Each form is solved in whichever chart (z or w/z) has the larger
    leading coefficient; exact zero end coefficients give roots at infinity
    or at zero.
    """
    coeffs = np.asarray(coeffs, dtype=complex)
    lead_shape = coeffs.shape[:-1]
    a = coeffs.reshape(-1, coeffs.shape[-1])
    n_rows, dp1 = a.shape
    d = dp1 - 1
    out = np.empty((n_rows, d, 2), dtype=complex)
    if n_rows == 0:
        return out.reshape(lead_shape + (d, 2))
    if np.any(np.all(a == 0, axis=1)):
        raise ValueError("binary form is identically zero")
    nz = a != 0
    lead0 = np.argmax(nz, axis=1)              # roots at infinity
    trail0 = np.argmax(nz[:, ::-1], axis=1)    # roots at zero
    keys = lead0 * (dp1 + 1) + trail0
    for key in np.unique(keys):
        rows = np.nonzero(keys == key)[0]
        m_inf, m_zero = divmod(int(key), dp1 + 1)
        mid = a[rows, m_inf : dp1 - m_zero]
        deg = mid.shape[1] - 1
        pts = np.empty((rows.size, d, 2), dtype=complex)
        pts[:, :m_inf] = (1.0, 0.0)
        pts[:, m_inf : m_inf + m_zero] = (0.0, 1.0)
        if deg > 0:
            use_z = np.abs(mid[:, 0]) >= np.abs(mid[:, -1])
            seg = pts[:, m_inf + m_zero :]
            if np.any(use_z):
                az = mid[use_z]
                r = _companion_roots(az)
                if polish:
                    r = _polish(az, r)
                seg[use_z, :, 0] = r
                seg[use_z, :, 1] = 1.0
            if np.any(~use_z):
                au = mid[~use_z, ::-1]
                r = _companion_roots(au)
                if polish:
                    r = _polish(au, r)
                seg[~use_z, :, 0] = 1.0
                seg[~use_z, :, 1] = r
            pts[:, m_inf + m_zero :] = seg
        out[rows] = pts
    return normalize(out).reshape(lead_shape + (d, 2))


def eval_binary_form(coeffs, x):
    """Evaluate forms ``coeffs[..., i] z^(d-i) w^i`` at homogeneous ``x``."""
    coeffs = np.asarray(coeffs, dtype=complex)
    d = coeffs.shape[-1] - 1
    z = x[..., 0]
    w = x[..., 1]
    val = np.zeros(np.broadcast_shapes(coeffs.shape[:-1], z.shape), dtype=complex)
    for i in range(d + 1):
        val = val + coeffs[..., i] * z ** (d - i) * w**i
    return val


def form_mul(a, b):
    """Product of binary forms (batched over leading axes)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    na, nb = a.shape[-1], b.shape[-1]
    shape = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    out = np.zeros(shape + (na + nb - 1,), dtype=complex)
    for i in range(na):
        out[..., i : i + nb] += a[..., i : i + 1] * b
    return out


def form_dz(a):
    """Partial derivative in z of a binary form."""
    d = a.shape[-1] - 1
    return a[..., :-1] * np.arange(d, 0, -1)


def form_dw(a):
    """Partial derivative in w of a binary form."""
    d = a.shape[-1] - 1
    return a[..., 1:] * np.arange(1, d + 1)


def sylvester_resultant(p, q):
    """Normalized resultant magnitude of two binary forms of equal degree.

    Returns ``|Res(p, q)| / (|p|^d |q|^d)`` where ``|.|`` is the coefficient
    2-norm; zero iff the forms share a root on P^1.
    """
    p = np.asarray(p, dtype=complex)
    q = np.asarray(q, dtype=complex)
    d = p.size - 1
    syl = np.zeros((2 * d, 2 * d), dtype=complex)
    for i in range(d):
        syl[i, i : i + d + 1] = p
        syl[d + i, i : i + d + 1] = q
    res = np.linalg.det(syl)
    return float(abs(res) / (np.linalg.norm(p) ** d * np.linalg.norm(q) ** d))


# ---------------------------------------------------------------------------
# Aberth-Ehrlich iteration for implicitly given polynomials
# ---------------------------------------------------------------------------

def aberth(newton_ratio, degree, radius=1.0, tol=1e-14, max_iter=500, seed=0, init=None):
    """Simultaneous approximation of all ``degree`` roots of a polynomial.

    ``newton_ratio(z)`` returns ``h(z) / h'(z)`` for an array of points; the
    polynomial itself never has to be expanded.  ``init`` replaces the default
    start on a circle of the given radius.  Returns ``(roots, n_iter,
    converged_mask)``.
    """
    rng = np.random.default_rng(seed)
    if init is not None:
        z = np.array(init, dtype=complex)
        if z.shape != (degree,):
            raise ValueError("init must hold one start per root")
    else:
        ang = 2 * np.pi * (np.arange(degree) + 0.25 + 0.5 * rng.random(degree)) / degree
        z = radius * (1.0 + 0.05 * rng.random(degree)) * np.exp(1j * ang)
    done = np.zeros(degree, dtype=bool)
    it = 0
    for it in range(1, max_iter + 1):
        act = ~done
        if not np.any(act):
            break
        za = z[act]
        ratio = newton_ratio(za)
        diff = za[:, None] - z[None, :]
        idx = np.nonzero(act)[0]
        diff[np.arange(idx.size), idx] = 1.0
        s = np.sum(1.0 / diff, axis=1) - 1.0
        denom = 1.0 - ratio * s
        w = np.where(np.abs(denom) > 0, ratio / denom, ratio)
        w = np.where(np.isfinite(w), w, 0.0)
        z[act] = za - w
        done[act] = np.abs(w) <= tol * (1.0 + np.abs(za))
    return z, it, done
