"""Holomorphic families of endomorphisms of P^k given by homogeneous lifts.

A family is ``lambda -> F_lambda``, where each of the k + 1 components of the
lift is a homogeneous polynomial of degree d in the phase variables whose
coefficients are polynomials in the single complex parameter lambda.

Coefficient layout (also the JSON layout): ``coeffs[i][m][p]`` is the
coefficient of ``lambda^p`` in the coefficient of monomial ``m`` of
component ``i``.  Monomials are the exponent vectors of total degree d in
``(x_0, ..., x_k)`` in graded-lex order (lexicographically decreasing), so
for k = 1 the order is ``z^d, z^(d-1) w, ..., w^d``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import projective as pj


class FamilyError(Exception):
    pass


class DegenerateParameterError(FamilyError):
    """The lift vanishes (numerically) at a nonzero point."""


class ChartError(FamilyError):
    pass


class CollisionError(FamilyError):
    """Two marked critical points come too close to be told apart."""

    def __init__(self, lam, distance):
        super().__init__(f"critical tracks collide at lambda={lam!r} (distance {distance:.3g})")
        self.lam = lam
        self.distance = distance


def monomials(k, d):
    """Exponent vectors of degree d in k + 1 variables, graded-lex order."""
    exps = [e for e in itertools.product(range(d + 1), repeat=k + 1) if sum(e) == d]
    return np.array(sorted(exps, reverse=True), dtype=int)


@dataclass(eq=False)
class FamilySpec:
    k: int
    d: int
    coeffs: np.ndarray
    domain: tuple = (-2.5, 1.5, -2.0, 2.0)
    name: str = ""
    exponents: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.k not in (1, 2):
            raise FamilyError("only k = 1 and k = 2 are supported")
        if self.d < 2:
            raise FamilyError("degree must be at least 2")
        self.exponents = monomials(self.k, self.d)
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim == 2:
            c = c[..., None]
        if c.shape[:2] != (self.k + 1, len(self.exponents)):
            raise FamilyError(
                f"coeffs must have shape (k+1, n_monomials, ...) = "
                f"({self.k + 1}, {len(self.exponents)}, ...), got {c.shape}"
            )
        self.coeffs = c
        self.domain = tuple(float(v) for v in self.domain)
        # lambda-derivative coefficients
        p = np.arange(c.shape[2])
        dc = (c * p)[..., 1:]
        self._dcoeffs = dc if dc.shape[2] else np.zeros_like(c[..., :1])

    # -- coefficients --------------------------------------------------------

    @staticmethod
    def _polyval(c, lam):
        lam = np.asarray(lam, dtype=complex)
        out = np.zeros(c.shape[:2] + lam.shape, dtype=complex)
        for p in range(c.shape[2] - 1, -1, -1):
            out = out * lam + c[:, :, p].reshape(c.shape[:2] + (1,) * lam.ndim)
        return out

    def coeffs_at(self, lam):
        """Monomial coefficients at lambda, shape ``(k+1, n_mono) + lam.shape``."""
        return self._polyval(self.coeffs, lam)

    def dcoeffs_at(self, lam):
        return self._polyval(self._dcoeffs, lam)

    def forms(self, lam):
        """k = 1: binary forms ``(P, Q)`` with shape ``lam.shape + (2, d+1)``."""
        if self.k != 1:
            raise FamilyError("forms are only defined for k = 1")
        return np.moveaxis(self.coeffs_at(lam), (0, 1), (-2, -1))

    def dforms(self, lam):
        return np.moveaxis(self.dcoeffs_at(lam), (0, 1), (-2, -1))

    @property
    def lam_degree(self):
        return self.coeffs.shape[2] - 1

    def is_constant(self):
        return not np.any(self.coeffs[..., 1:])

    # -- lift evaluation -----------------------------------------------------

    def _monos(self, x):
        """Monomial values and their partial derivatives at ``x``."""
        e = self.exponents
        pw = [
            np.stack([x[..., j] ** p for p in range(self.d + 1)], axis=-1)
            for j in range(self.k + 1)
        ]
        vals = np.ones(x.shape[:-1] + (len(e),), dtype=complex)
        for j in range(self.k + 1):
            vals = vals * pw[j][..., e[:, j]]
        ders = []
        for j in range(self.k + 1):
            dj = np.where(e[:, j] > 0, e[:, j], 0)
            term = dj * pw[j][..., np.maximum(e[:, j] - 1, 0)]
            for l in range(self.k + 1):
                if l != j:
                    term = term * pw[l][..., e[:, l]]
            ders.append(term)
        return vals, np.stack(ders, axis=-1)

    def lift(self, lam, x):
        """``F_lambda(x)`` for homogeneous ``x`` of shape ``(..., k+1)``."""
        x = np.asarray(x, dtype=complex)
        c = np.moveaxis(self.coeffs_at(lam), (0, 1), (-2, -1))
        vals, _ = self._monos(x)
        return np.einsum("...im,...m->...i", c, vals)

    def lift_jet(self, lam, x):
        """Value, phase Jacobian ``[..., i, j] = dF_i/dx_j`` and lambda-derivative."""
        x = np.asarray(x, dtype=complex)
        c = np.moveaxis(self.coeffs_at(lam), (0, 1), (-2, -1))
        dc = np.moveaxis(self.dcoeffs_at(lam), (0, 1), (-2, -1))
        vals, ders = self._monos(x)
        f = np.einsum("...im,...m->...i", c, vals)
        jac = np.einsum("...im,...mj->...ij", c, ders)
        flam = np.einsum("...im,...m->...i", dc, vals)
        return f, jac, flam

    def step(self, lam, x, xp=None):
        """One renormalized step of the lift, optionally carrying a lambda-tangent.

        With ``xp = dx/dlambda`` the returned tangent is
        ``DF . xp + dF/dlambda``.  Both outputs are divided by the same positive
        real number, which does not change the projective point or its
        projective derivative.
        """
        if xp is None:
            return pj.rescale(self.lift(lam, x))
        f, jac, flam = self.lift_jet(lam, x)
        fp = np.einsum("...ij,...j->...i", jac, xp) + flam
        return pj.rescale(f, fp)

    def iterate(self, lam, x, n):
        for _ in range(n):
            x = self.step(lam, x)
        return x

    # -- polynomial structure (k = 1) ---------------------------------------

    def polynomial_scale(self, lam):
        """For a polynomial family return the w^d coefficient of Q at lambda.

        Raises FamilyError if Q has any other monomial (infinity is then not
        totally invariant).
        """
        if self.k != 1:
            raise FamilyError("polynomial structure only for k = 1")
        q = self.coeffs[1]
        if np.any(q[:-1] != 0):
            raise FamilyError("family is not polynomial (Q is not a multiple of w^d)")
        return self.forms(lam)[..., 1, -1]

    def is_polynomial(self):
        try:
            self.polynomial_scale(0.0)
        except FamilyError:
            return False
        return True

    def affine_poly(self, lam):
        """Coefficient rows (numpy order) of the affine polynomial ``P(z,1)/q``."""
        q = self.polynomial_scale(lam)
        p = self.forms(lam)[..., 0, :]
        return p / q[..., None]

    def jacobian_form(self, lam):
        """k = 1: the binary form ``det DF`` (degree 2d-2) and its lambda-derivative."""
        fo = self.forms(lam)
        dfo = self.dforms(lam)
        P, Q = fo[..., 0, :], fo[..., 1, :]
        dP, dQ = dfo[..., 0, :], dfo[..., 1, :]
        J = pj.form_mul(pj.form_dz(P), pj.form_dw(Q)) - pj.form_mul(pj.form_dw(P), pj.form_dz(Q))
        Jl = (
            pj.form_mul(pj.form_dz(dP), pj.form_dw(Q))
            + pj.form_mul(pj.form_dz(P), pj.form_dw(dQ))
            - pj.form_mul(pj.form_dw(dP), pj.form_dz(Q))
            - pj.form_mul(pj.form_dw(P), pj.form_dz(dQ))
        )
        return J, Jl

    def critical_points(self, lam):
        """All 2d-2 critical points (with multiplicity), shape ``lam.shape + (2d-2, 2)``."""
        J, _ = self.jacobian_form(np.asarray(lam, dtype=complex))
        return pj.binary_form_roots(J)

    # -- checks ----------------------------------------------------------------

    def homogeneity_error(self, lam, x, t):
        x = np.asarray(x, dtype=complex)
        lhs = self.lift(lam, t * x)
        rhs = t**self.d * self.lift(lam, x)
        return np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300)

    def nondegeneracy(self, lam):
        """Normalized resultant (k = 1) or sampled min ``|F(x)|/|x|^d`` (k = 2)."""
        if self.k == 1:
            P, Q = self.forms(complex(lam))
            return pj.sylvester_resultant(P, Q)
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4096, 3)) + 1j * rng.normal(size=(4096, 3))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        f = self.lift(complex(lam), x)
        scale = np.max(np.abs(self.coeffs_at(complex(lam))))
        return float(np.min(np.linalg.norm(f, axis=1)) / scale)

    # -- serialization ---------------------------------------------------------

    def to_json(self):
        coeffs = [
            [[[float(c.real), float(c.imag)] for c in mono] for mono in comp]
            for comp in self.coeffs
        ]
        out = {
            "k": self.k,
            "d": self.d,
            "coeffs": coeffs,
            "domain": {"re": list(self.domain[:2]), "im": list(self.domain[2:])},
        }
        if self.name:
            out["name"] = self.name
        return out

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            obj = json.loads(obj)
        k, d = int(obj["k"]), int(obj["d"])
        comps = obj["coeffs"]
        n_lam = max(len(mono) for comp in comps for mono in comp)
        n_lam = max(n_lam, 1)
        arr = np.zeros((len(comps), len(comps[0]), n_lam), dtype=complex)
        for i, comp in enumerate(comps):
            for m, mono in enumerate(comp):
                for p, pair in enumerate(mono):
                    arr[i, m, p] = complex(pair[0], pair[1])
        dom = obj.get("domain", {"re": [-2.5, 1.5], "im": [-2.0, 2.0]})
        return cls(k, d, arr, tuple(dom["re"]) + tuple(dom["im"]), obj.get("name", ""))


# ---------------------------------------------------------------------------
# standard families
# ---------------------------------------------------------------------------

def polynomial_family(d, terms, name="", domain=(-2.5, 1.5, -2.0, 2.0)):
    """k = 1 family ``z -> sum_j a_j(lambda) z^j``.

    ``terms`` maps the power j of z to the ascending coefficient list of the
    polynomial ``a_j(lambda)``; ``terms[d]`` must be a nonzero constant.
    """
    n_lam = max(len(v) for v in terms.values())
    c = np.zeros((2, d + 1, n_lam), dtype=complex)
    for j, poly in terms.items():
        c[0, d - j, : len(poly)] = poly
    c[1, d, 0] = 1.0
    return FamilySpec(1, d, c, domain, name)


def quadratic_family():
    """``z^2 + c``."""
    return polynomial_family(2, {2: [1.0], 0: [0.0, 1.0]}, "quadratic")


def power_family(d=2):
    """``z^d`` (constant in lambda)."""
    return polynomial_family(d, {d: [1.0]}, f"power{d}")


def cubic_family():
    """``z^3 + c z``."""
    return polynomial_family(3, {3: [1.0], 1: [0.0, 1.0]}, "cubic")


def skew_product_family(d=2, coupling=1.0):
    """k = 2 skew product ``(z, w) -> (z^d, w^d + coupling * lambda * z^(d-1) ... )``.

    For d = 2 this is ``(z^2, w^2 + lambda z)``; the lift is
    ``(x^2, y^2 + lambda x t, t^2)``.
    """
    exps = [tuple(e) for e in monomials(2, d)]
    c = np.zeros((3, len(exps), 2), dtype=complex)
    c[0, exps.index((d, 0, 0)), 0] = 1.0
    c[1, exps.index((0, d, 0)), 0] = 1.0
    c[1, exps.index((1, 0, d - 1)), 1] = coupling
    c[2, exps.index((0, 0, d)), 0] = 1.0
    return FamilySpec(2, d, c, (-0.1, 0.1, -0.1, 0.1), f"skew{d}")


# ---------------------------------------------------------------------------
# evaluation and derivatives
# ---------------------------------------------------------------------------

def _as_coords(z):
    if isinstance(z, pj.ProjPoint):
        return z.array
    x = np.asarray(z, dtype=complex)
    return pj.lift_affine(x) if x.ndim == 0 else x


def evaluate(family, lam, z):
    """Image ``f_lambda(z)`` as a ProjPoint."""
    x = _as_coords(z)
    x = pj.rescale(x)
    f = family.lift(lam, x)
    scale = max(np.max(np.abs(family.coeffs_at(lam))), 1e-300)
    if np.max(np.abs(f)) < 1e-13 * scale:
        raise DegenerateParameterError(f"lift vanishes at {z!r} for lambda={lam!r}")
    return pj.ProjPoint(f)


def fs_jacobian(family, lam, x):
    """Modulus of the FS-metric Jacobian determinant of ``f_lambda`` at ``[x]``.

    Chart-free formula ``|det DF(x)| |x|^(k+1) / (d |F(x)|^(k+1))``.
    Vectorized over leading axes of ``x``.
    """
    x = pj.rescale(np.asarray(x, dtype=complex))
    f, jac, _ = family.lift_jet(lam, x)
    det = np.linalg.det(jac)
    nx = np.linalg.norm(x, axis=-1)
    nf = np.linalg.norm(f, axis=-1)
    kp = family.k + 1
    return np.abs(det) * nx**kp / (family.d * nf**kp)


def log_fs_jacobian(family, lam, x):
    """``log |Jac f_lambda|`` in the FS metric, computed without overflow."""
    x = pj.rescale(np.asarray(x, dtype=complex))
    f, jac, _ = family.lift_jet(lam, x)
    det = np.abs(np.linalg.det(jac))
    kp = family.k + 1
    with np.errstate(divide="ignore"):
        return (
            np.log(det)
            + kp * np.log(np.linalg.norm(x, axis=-1))
            - np.log(family.d)
            - kp * np.log(np.linalg.norm(f, axis=-1))
        )


@dataclass
class Derivative:
    jac_z: complex
    jac_lam: complex
    source_chart: int
    target_chart: int


def derivative(family, lam, z, source_chart=None, target_chart=None):
    """Phase and parameter derivatives of ``f_lambda`` at ``z`` (k = 1).

    Charts: 1 means ``w = 1`` (affine z), 0 means ``z = 1`` (coordinate
    ``u = w/z``).  By default the chart in which the point has the smaller
    affine coordinate is used at both ends.  ``jac_z`` is the chart derivative
    times ``(1 + |x|^2) / (1 + |y|^2)``; ``jac_lam`` is the chart
    lambda-derivative divided by ``1 + |y|^2``.
    """
    if family.k != 1:
        raise FamilyError("derivative() is implemented for k = 1")
    x = pj.normalize(_as_coords(z))
    if source_chart is None:
        source_chart = 1 if abs(x[1]) >= abs(x[0]) else 0
    if abs(x[source_chart]) < 1e-12:
        raise ChartError("source point is at the singularity of the chosen chart")
    x = x / x[source_chart]
    f, jac, flam = family.lift_jet(lam, x)
    if target_chart is None:
        target_chart = 1 if abs(f[1]) >= abs(f[0]) else 0
    if abs(f[target_chart]) < 1e-12 * np.max(np.abs(f)):
        raise ChartError("image is at the singularity of the chosen chart")
    other_s = 1 - source_chart
    other_t = 1 - target_chart
    # tangent of x along its free coordinate
    fp = jac[:, other_s]
    ft, fo = f[target_chart], f[other_t]
    y = fo / ft
    dy = (fp[other_t] * ft - fo * fp[target_chart]) / ft**2
    dyl = (flam[other_t] * ft - fo * flam[target_chart]) / ft**2
    xa = x[other_s]
    jac_z = dy * (1 + abs(xa) ** 2) / (1 + abs(y) ** 2)
    jac_lam = dyl / (1 + abs(y) ** 2)
    return Derivative(complex(jac_z), complex(jac_lam), source_chart, target_chart)


# ---------------------------------------------------------------------------
# parameter grids and tracks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamGrid:
    """Cell-centred rectangular grid ``nx * ny`` over ``[re0,re1] x [im0,im1]``.

    Samples are stored row-major (``index = iy * nx + ix``), rows running
    along the real axis.
    """

    re0: float
    re1: float
    im0: float
    im1: float
    nx: int
    ny: int

    @classmethod
    def around(cls, center, half_width, n):
        c = complex(center)
        return cls(c.real - half_width, c.real + half_width,
                   c.imag - half_width, c.imag + half_width, n, n)

    @property
    def hx(self):
        return (self.re1 - self.re0) / self.nx

    @property
    def hy(self):
        return (self.im1 - self.im0) / self.ny

    @property
    def cell_area(self):
        return self.hx * self.hy

    @property
    def size(self):
        return self.nx * self.ny

    def centers_re(self):
        return self.re0 + (np.arange(self.nx) + 0.5) * self.hx

    def centers_im(self):
        return self.im0 + (np.arange(self.ny) + 0.5) * self.hy

    def lam(self):
        """Complex cell centres, shape ``(ny, nx)``."""
        return self.centers_re()[None, :] + 1j * self.centers_im()[:, None]

    def flat(self):
        return self.lam().ravel()

    def index_of(self, lam):
        lam = np.asarray(lam, dtype=complex)
        ix = np.clip(np.floor((lam.real - self.re0) / self.hx), 0, self.nx - 1).astype(int)
        iy = np.clip(np.floor((lam.imag - self.im0) / self.hy), 0, self.ny - 1).astype(int)
        return iy * self.nx + ix

    def contains(self, lam):
        lam = np.asarray(lam, dtype=complex)
        return (
            (lam.real >= self.re0) & (lam.real <= self.re1)
            & (lam.imag >= self.im0) & (lam.imag <= self.im1)
        )

    def spanning_parents(self):
        """Parent of each sample in a spanning tree of grid neighbours (-1 at the root)."""
        par = np.empty(self.size, dtype=int)
        idx = np.arange(self.size).reshape(self.ny, self.nx)
        par[idx[0, 0]] = -1
        par[idx[0, 1:]] = idx[0, :-1]
        par[idx[1:, :]] = idx[:-1, :]
        return par

    def expanded(self, cells=1):
        return ParamGrid(self.re0 - cells * self.hx, self.re1 + cells * self.hx,
                         self.im0 - cells * self.hy, self.im1 + cells * self.hy,
                         self.nx + 2 * cells, self.ny + 2 * cells)


TRACK_KINDS = ("critical_marking", "postcritical", "inverse_branch", "repelling_point")


@dataclass(eq=False)
class MotionTrack:
    """A point function ``lambda -> gamma(lambda)`` sampled on a parameter grid.

    ``values`` has shape ``(grid.size, k+1)``; ``derivs`` (optional) holds a
    lifted lambda-derivative with the same shape.  ``evaluator``, when
    present, recomputes ``(values, derivs)`` at arbitrary parameters and is
    used for adaptive refinement.
    """

    base_grid: ParamGrid
    values: np.ndarray
    kind: str
    derivs: np.ndarray | None = None
    evaluator: object = None
    multiplicity: int = 1
    label: str = ""

    def __post_init__(self):
        if self.kind not in TRACK_KINDS:
            raise ValueError(f"unknown track kind {self.kind!r}")

    def evaluate(self, lam):
        lam = np.asarray(lam, dtype=complex)
        if self.evaluator is not None:
            return self.evaluator(lam)
        idx = self.base_grid.index_of(lam)
        d = self.derivs[idx] if self.derivs is not None else np.zeros_like(self.values[idx])
        return self.values[idx], d

    def max_step(self):
        """Largest chordal distance between grid-adjacent samples."""
        v = self.values.reshape(self.base_grid.ny, self.base_grid.nx, -1)
        steps = [0.0]
        if self.base_grid.nx > 1:
            steps.append(float(np.max(pj.chordal(v[:, 1:], v[:, :-1]))))
        if self.base_grid.ny > 1:
            steps.append(float(np.max(pj.chordal(v[1:], v[:-1]))))
        return max(steps)


COLLISION_TOL = 1e-6
MAX_SUBDIVISION = 4


def _match(prev, roots):
    """Assignment of ``roots`` to ``prev`` minimizing chordal distance; ambiguity flag."""
    cost = pj.chordal(prev[:, None, :], roots[None, :, :])
    rows, cols = linear_sum_assignment(cost)
    order = cols[np.argsort(rows)]
    chosen = cost[np.arange(len(prev)), order]
    # ambiguous when some track is nearly as close to a different root
    second = np.sort(cost, axis=1)[:, 1] if cost.shape[1] > 1 else np.full(len(prev), np.inf)
    ambiguous = np.any((chosen > 1e-12) & (chosen > 0.5 * second))
    return order, ambiguous


def _min_separation(roots):
    n = len(roots)
    if n < 2:
        return np.inf
    dist = pj.chordal(roots[:, None, :], roots[None, :, :])
    dist[np.arange(n), np.arange(n)] = np.inf
    return float(np.min(dist))


def _persistent_multiplicity(J):
    """Number of roots pinned exactly at infinity and at zero for every lambda."""
    nz = np.any(J != 0, axis=tuple(range(J.ndim - 1)))
    lead = int(np.argmax(nz))
    trail = int(np.argmax(nz[::-1]))
    return lead, trail


def critical_marking(family, grid, collision_tol=COLLISION_TOL):
    """Marked critical points over ``grid`` as ``2d - 2`` MotionTracks.

    Roots of the Jacobian form are matched from each sample to its spanning
    tree parent; ambiguous matches are retried on up to 2^4 intermediate
    parameters.  Roots that are pinned at infinity or zero for every
    parameter (persistent multiple critical points) are kept as constant
    tracks; any other pair of roots closer than ``collision_tol`` raises
    CollisionError.
    """
    if family.k != 1:
        raise FamilyError("critical markings are implemented for k = 1")
    lam = grid.flat()
    J, Jl = family.jacobian_form(lam)
    m_inf, m_zero = _persistent_multiplicity(J)
    roots = pj.binary_form_roots(J)
    n_crit = 2 * family.d - 2
    n_pinned = m_inf + m_zero
    parents = grid.spanning_parents()
    vals = np.empty((grid.size, n_crit, 2), dtype=complex)

    def check(lmb, r):
        free = r[n_pinned:]
        sep = _min_separation(free)
        if sep < collision_tol:
            raise CollisionError(complex(lmb), sep)
        if n_pinned and len(free):
            pinned_dist = np.min(pj.chordal(free[:, None, :], r[None, :n_pinned, :]))
            if pinned_dist < collision_tol:
                raise CollisionError(complex(lmb), float(pinned_dist))

    # row-major order visits every parent before its children
    for i in range(grid.size):
        r = roots[i]
        check(lam[i], r)
        vals[i, :n_pinned] = r[:n_pinned]
        p = parents[i]
        if p < 0:
            vals[i, n_pinned:] = r[n_pinned:]
            continue
        prev = vals[p, n_pinned:]
        perm, amb = _match(prev, r[n_pinned:])
        level = 0
        while amb and level < MAX_SUBDIVISION:
            level += 1
            cur = prev
            amb = False
            for t in np.arange(1, 2**level + 1) / 2**level:
                lm = lam[p] + t * (lam[i] - lam[p])
                rt = family.critical_points(np.array([lm]))[0]
                check(lm, rt)
                pm, a = _match(cur, rt[n_pinned:])
                amb = amb or a
                cur = rt[n_pinned:][pm]
            if not amb:
                perm, _ = _match(cur, r[n_pinned:])
        vals[i, n_pinned:] = r[n_pinned:][perm]

    derivs = _marking_derivatives(family, lam, vals, J, Jl)
    tracks = []
    for j in range(n_crit):
        ref = MotionTrack(grid, vals[:, j], "critical_marking", derivs[:, j], label=f"c{j}")
        ref.evaluator = _MarkingEvaluator(family, ref)
        tracks.append(ref)
    return tracks


def _marking_derivatives(family, lam, vals, J, Jl):
    """Implicit-function lambda-derivatives of critical points, lifted to C^2.

    For a simple root in the chart ``w = 1``: ``z' = -J_lambda / J_z``; in the
    chart ``z = 1``: ``u' = -J_lambda / J_u``.  Multiple roots get a zero
    derivative when pinned, otherwise a central finite difference.
    """
    n, m, _ = vals.shape
    Jz = pj.form_dz(J)
    Jw = pj.form_dw(J)
    out = np.zeros_like(vals)
    for j in range(m):
        x = vals[:, j]
        fin = np.abs(x[:, 1]) >= np.abs(x[:, 0])
        with np.errstate(divide="ignore", invalid="ignore"):
            xa = np.where(fin[:, None], x / x[:, 1:2], x / x[:, 0:1])
        jl = pj.eval_binary_form(Jl, xa)
        jz = np.where(fin, pj.eval_binary_form(Jz, xa), pj.eval_binary_form(Jw, xa))
        scale = np.max(np.abs(J), axis=-1)
        simple = np.abs(jz) > 1e-9 * scale
        with np.errstate(divide="ignore", invalid="ignore"):
            sp = -jl / jz
        sp = np.where(simple, sp, 0.0)
        out[:, j, 0] = np.where(fin, sp, 0.0)
        out[:, j, 1] = np.where(fin, 0.0, sp)
        # rescale to the normalized representative used in vals
        out[:, j] *= np.where(fin, x[:, 1], x[:, 0])[:, None]
        bad = ~simple & ~_pinned(x)
        if np.any(bad):
            out[bad, j] = _fd_marking(family, lam[bad], x[bad])
    return out


def _pinned(x):
    return (np.abs(x[:, 0]) == 0) | (np.abs(x[:, 1]) == 0)


def _fd_marking(family, lam, x, h=1e-6):
    res = np.zeros_like(x)
    for i in range(len(lam)):
        pts = []
        for s in (h, -h):
            r = family.critical_points(np.array([lam[i] + s]))[0]
            pts.append(r[np.argmin(pj.chordal(r, x[i]))])
        a, b = pts
        # compare in the chart where x is finite
        c = 1 if abs(x[i, 1]) >= abs(x[i, 0]) else 0
        ya, yb = a / a[c], b / b[c]
        res[i] = (ya - yb) / (2 * h) * x[i, c]
    return res


class _MarkingEvaluator:
    """Re-evaluates a critical marking at arbitrary parameters by nearest root."""

    def __init__(self, family, track):
        self.family = family
        self.track = track

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=complex)
        shape = lam.shape
        flat = lam.ravel()
        idx = self.track.base_grid.index_of(flat)
        ref = self.track.values[idx]
        J, Jl = self.family.jacobian_form(flat)
        roots = pj.binary_form_roots(J)
        pick = np.argmin(pj.chordal(roots, ref[:, None, :]), axis=1)
        x = roots[np.arange(len(flat)), pick]
        xp = _marking_derivatives(self.family, flat, x[:, None, :], J, Jl)[:, 0]
        return x.reshape(shape + (2,)), xp.reshape(shape + (2,))
