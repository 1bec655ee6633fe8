"""Lyapunov function of a family: three estimators, rasters and dd^c L."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import projective as pj
from .equilibrium import (birkhoff_lyapunov, choose_seed, escape_rate, preimages,
                          sample_equilibrium)
from .family import FamilyError, ParamGrid, log_fs_jacobian
from .stats import fsum

ROOT_BUDGET = 2**16
GROUP_TOL = 1e-7
RESIDUAL_TOL = 1e-6
COND_LIMIT = 1e8
PARABOLIC_TOL = 1e-3

# fixed unitary rotation; with it no fixed point of a family of interest sits
# at the chart's infinity
_ROT = np.array([[0.8, -0.6j], [-0.6j, 0.8]], dtype=complex) @ np.array(
    [[np.exp(0.3j), 0], [0, np.exp(-0.3j)]]
)


class RootBudgetError(FamilyError):
    pass


class NotPolynomialError(FamilyError):
    pass


@dataclass
class RepellingCycle:
    period: int
    coords: np.ndarray
    multiplier: complex
    one_step_log_jac_sum: float

    @property
    def points(self):
        return [pj.ProjPoint(c) for c in self.coords]


@dataclass
class CycleSet:
    lam: complex
    n: int
    cycles: list
    n_roots: int
    n_ill_conditioned: int
    n_excluded: int
    max_residual: float
    julia_filter: str = "not applied: all repelling cycles kept"

    def __iter__(self):
        return iter(self.cycles)

    def __len__(self):
        return len(self.cycles)

    @property
    def n_points(self):
        return sum(c.period for c in self.cycles)


def _iterate_with_tangent(family, lam, x, t, n):
    for _ in range(n):
        f, jac, _ = family.lift_jet(lam, x)
        tp = np.einsum("...ij,...j->...i", jac, t)
        x, t = pj.rescale(f, tp)
    return x, t


def _chart_derivative(family, lam, y):
    """Derivative of ``f`` in the rotated chart at rotated-affine points ``y``."""
    X = pj.lift_affine(y) @ _ROT.T
    T = np.broadcast_to(_ROT[:, 0], X.shape)
    f, t = _iterate_with_tangent(family, lam, X, T, 1)
    Z = f @ np.conj(_ROT)
    Zp = t @ np.conj(_ROT)
    return (Zp[..., 0] * Z[..., 1] - Z[..., 0] * Zp[..., 1]) / Z[..., 1] ** 2, Z


def _tree_start(family, lam, n):
    """Aberth start: the full n-th preimage tree of a generic point plus infinity.

    Periodic points and iterated preimages equidistribute towards the same
    measure, so this start sits next to the roots and avoids the slow linear
    phase of a start on a circle.
    """
    x = choose_seed(family, lam, 0)[None, :]
    for _ in range(n):
        x = preimages(family, lam, x).reshape(-1, 2)
    x = np.concatenate([x, [[1.0, 0.0]]])
    y = x @ np.conj(_ROT)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = y[:, 0] / y[:, 1]
    rng = np.random.default_rng(n)
    jitter = 1e-3 * (rng.random(z.size) + 1j * rng.random(z.size))
    return np.where(np.isfinite(z), z, 1e8) * (1 + jitter)


def fixed_points(family, lam, n):
    """All ``d^n + 1`` fixed points of ``f^n`` as rotated-chart coordinates.

    The fixed-point polynomial ``h(y) = y Z_1(y) - Z_0(y)`` with
    ``Z = F^n(y, 1)`` is never expanded; Aberth iteration only needs the
    Newton ratio, which is computed by iterating the lift with a tangent.
    """
    if family.k != 1:
        raise FamilyError("periodic points are only implemented for k = 1")
    d = family.d
    if d**n > ROOT_BUDGET:
        raise RootBudgetError(f"d^n = {d**n} exceeds the root budget {ROOT_BUDGET}")
    lam = complex(lam)
    tan0 = _ROT[:, 0]

    def ratio(y):
        X = pj.lift_affine(y) @ _ROT.T
        T = np.broadcast_to(tan0, X.shape)
        Z, Zp = _iterate_with_tangent(family, lam, X, T, n)
        Z = Z @ np.conj(_ROT)
        Zp = Zp @ np.conj(_ROT)
        h = y * Z[:, 1] - Z[:, 0]
        dh = Z[:, 1] + y * Zp[:, 1] - Zp[:, 0]
        return h / dh

    y, _, done = pj.aberth(ratio, d**n + 1, max_iter=800, init=_tree_start(family, lam, n))
    return y, done


def repelling_cycles(family, lam, n):
    """Repelling points of period dividing ``n`` grouped into cycles."""
    lam = complex(lam)
    y, done = fixed_points(family, lam, n)
    X = pj.normalize(pj.lift_affine(y) @ _ROT.T)
    Xn = X.copy()
    for _ in range(n):
        Xn = family.step(lam, Xn)
    resid = pj.chordal(Xn, X)
    # multiplier of f^n at each root; a multiple root has multiplier 1
    Z, Zp = _iterate_with_tangent(family, lam, pj.lift_affine(y) @ _ROT.T,
                                  np.broadcast_to(_ROT[:, 0], (y.size, 2)), n)
    Z, Zp = Z @ np.conj(_ROT), Zp @ np.conj(_ROT)
    with np.errstate(divide="ignore", invalid="ignore"):
        mult_n = (Zp[:, 0] * Z[:, 1] - Z[:, 0] * Zp[:, 1]) / Z[:, 1] ** 2
        cond = 1.0 / np.abs(1.0 - mult_n)
    ill = (resid > RESIDUAL_TOL) | ~done | (cond > COND_LIMIT)
    # numerically coincident roots with multiplier near 1 are one parabolic
    # root found twice; close but well-conditioned roots are kept
    dist = pj.chordal(X[:, None, :], X[None, :, :])
    np.fill_diagonal(dist, np.inf)
    multiple = (np.min(dist, axis=1) < GROUP_TOL) & (np.abs(1.0 - mult_n) < PARABOLIC_TOL)
    deriv, img = _chart_derivative(family, lam, y)
    img_aff = pj.affine(img)
    # successor map on roots
    dimg = pj.chordal(pj.lift_affine(img_aff)[:, None, :], pj.lift_affine(y)[None, :, :])
    succ = np.argmin(dimg, axis=1)
    succ_ok = dimg[np.arange(y.size), succ] < max(GROUP_TOL, 10 * RESIDUAL_TOL)
    logjac = log_fs_jacobian(family, lam, X)
    seen = np.zeros(y.size, dtype=bool)
    cycles = []
    n_excl = 0
    for i in range(y.size):
        if seen[i]:
            continue
        orbit = [i]
        j = i
        ok = True
        for _ in range(n):
            if not succ_ok[j]:
                ok = False
                break
            j = int(succ[j])
            if j == i:
                break
            orbit.append(j)
        ok = ok and j == i and not np.any(seen[orbit])
        seen[orbit] = True
        if not ok or np.any(ill[orbit]) or np.any(multiple[orbit]):
            n_excl += len(orbit)
            continue
        mult = complex(np.prod(deriv[orbit]))
        if not abs(mult) > 1.0 + 1e-9:
            continue
        cycles.append(
            RepellingCycle(len(orbit), X[orbit], mult, fsum(logjac[orbit]))
        )
    return CycleSet(
        lam, n, cycles, int(y.size), int(np.count_nonzero(ill)), n_excl,
        float(np.max(resid)),
    )


@dataclass(frozen=True)
class ApproxLyapunov:
    value: float
    n_points: int
    n: int
    n_excluded: int
    note: str = "Julia-set membership of cycles not tested"

    def __float__(self):
        return self.value


def approx_lyapunov(family, lam, n):
    """``d^{-kn}`` times the sum of ``log|jac|`` over repelling ``n``-periodic points."""
    cs = repelling_cycles(family, lam, n)
    total = fsum([c.one_step_log_jac_sum for c in cs.cycles])
    return ApproxLyapunov(
        total / float(family.d) ** (family.k * n), cs.n_points, n, cs.n_excluded
    )


def finite_critical_points(family, lam):
    """Critical points of the affine polynomial (numpy roots of ``p'``)."""
    if family.k != 1 or not family.is_polynomial():
        raise NotPolynomialError("infinity is not totally invariant for this family")
    a = np.asarray(family.affine_poly(complex(lam)))
    da = np.polyder(a)
    return np.roots(da) if da.size > 1 else np.zeros(0, dtype=complex)


def green_formula_lyapunov(family, lam, depth=60):
    """``log d + sum_j G(c_j)`` over the finite critical points of a polynomial."""
    c = finite_critical_points(family, lam)
    g, _ = escape_rate(family, complex(lam), pj.lift_affine(c), depth)
    return math.log(family.d) + fsum(g)


def green_formula_grid(family, lam, depth=60):
    """Vectorized Green-formula estimate over an array of parameters."""
    if family.k != 1 or not family.is_polynomial():
        raise NotPolynomialError("infinity is not totally invariant for this family")
    lam = np.asarray(lam, dtype=complex)
    a = family.affine_poly(lam)                       # lam.shape + (d+1,)
    d = family.d
    da = a[..., :-1] * np.arange(d, 0, -1)           # lam.shape + (d,)
    crit = pj.binary_form_roots(da)                    # lam.shape + (d-1, 2)
    g, _ = escape_rate(family, lam[..., None], crit, depth)
    return math.log(d) + np.sum(g, axis=-1)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

ESTIMATORS = ("green", "approx", "birkhoff")


@dataclass
class LyapunovRaster:
    grid: ParamGrid
    L: np.ndarray
    laplacian: np.ndarray
    estimator: str
    params: dict
    n_failed: int = 0
    notes: list = field(default_factory=list)

    @property
    def valid(self):
        return np.isfinite(self.laplacian)

    def total_mass(self, absolute=True):
        v = self.laplacian[self.valid]
        return fsum(np.abs(v) if absolute else v)


def discrete_laplacian(L, hx, hy):
    """Five-point Laplacian times the cell area over 2 pi; NaN on the border."""
    lap = np.full(L.shape, np.nan)
    c = L[1:-1, 1:-1]
    lxx = (L[1:-1, 2:] + L[1:-1, :-2] - 2 * c) / hx**2
    lyy = (L[2:, 1:-1] + L[:-2, 1:-1] - 2 * c) / hy**2
    lap[1:-1, 1:-1] = (lxx + lyy) * hx * hy / (2 * math.pi)
    return lap


def _cell_estimate(family, lam, estimator, params, index):
    if estimator == "approx":
        return approx_lyapunov(family, lam, params.get("n", 8)).value
    seed = np.random.SeedSequence(params.get("seed", 0), spawn_key=(index,))
    seed_int = int(seed.generate_state(1)[0])
    s = sample_equilibrium(
        family, lam, params.get("n_points", 256), params.get("depth", 30), seed_int
    )
    return birkhoff_lyapunov(family, lam, s, params.get("n_iter", 100)).value


def lyapunov_raster(family, grid, estimator="green", params=None, threads=1):
    """Fill ``L`` on the cell centres of ``grid`` and take its discrete dd^c."""
    params = dict(params or {})
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}")
    if grid.size > 4096**2:
        raise ValueError("resolution above 4096^2")
    lam = grid.lam()
    L = np.full(lam.shape, np.nan)
    rows = np.array_split(np.arange(grid.ny), max(1, min(grid.ny, 4 * threads)))

    if estimator == "green":
        depth = params.get("depth", 60)
        if family.is_constant():
            # L does not depend on lambda; evaluate once
            L[:] = _single(family, lam.flat[0], depth)

            def work(r):
                return None
        else:
            def work(r):
                with np.errstate(all="ignore"):
                    L[r] = green_formula_grid(family, lam[r], depth)
    else:
        def work(r):
            for i in r:
                for j in range(grid.nx):
                    try:
                        L[i, j] = _cell_estimate(
                            family, lam[i, j], estimator, params, i * grid.nx + j
                        )
                    except (FamilyError, np.linalg.LinAlgError, ValueError):
                        L[i, j] = np.nan

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, rows))
    else:
        for r in rows:
            work(r)
    n_failed = int(np.count_nonzero(~np.isfinite(L)))
    notes = []
    if estimator == "approx":
        notes.append("approx estimator: Julia-set membership of cycles not tested")
    if n_failed > 0.01 * grid.size:
        raise FamilyError(f"{n_failed} of {grid.size} cells failed (limit 1%)")
    lap = discrete_laplacian(L, grid.hx, grid.hy)
    return LyapunovRaster(grid, L, lap, estimator, params, n_failed, notes)


def _single(family, lam, depth):
    if family.is_polynomial():
        return float(green_formula_lyapunov(family, lam, depth))
    raise NotPolynomialError("green estimator requires a polynomial family")


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_pgm(values, path, vmin=None, vmax=None, label="value"):
    """16-bit binary PGM; the value mapping is stated in a header comment."""
    v = np.asarray(values, dtype=float)
    fin = np.isfinite(v)
    lo = float(np.min(v[fin])) if vmin is None and fin.any() else float(vmin or 0.0)
    hi = float(np.max(v[fin])) if vmax is None and fin.any() else float(vmax or 1.0)
    span = hi - lo if hi > lo else 1.0
    q = np.zeros(v.shape, dtype=">u2")
    q[fin] = np.clip(np.rint((v[fin] - lo) / span * 65534) + 1, 1, 65535)
    ny, nx = v.shape
    head = (
        f"P5\n# {label} = {lo!r} + (pixel - 1) * {span / 65534!r}; pixel 0 = invalid\n"
        f"# row 0 is the top edge (largest imaginary part)\n{nx} {ny}\n65535\n"
    )
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(q[::-1].tobytes())


def read_pgm(path):
    """Inverse of :func:`write_pgm` (returns values with NaN for pixel 0)."""
    with open(path, "rb") as fh:
        data = fh.read()
    lines = []
    pos = 0
    while len([ln for ln in lines if not ln.startswith("#")]) < 3:
        end = data.index(b"\n", pos)
        lines.append(data[pos:end].decode("ascii"))
        pos = end + 1
    comment = [ln for ln in lines if ln.startswith("# ")][0]
    rhs = comment.split("=", 1)[1].split(";")[0]
    lo = float(rhs.split("+")[0])
    step = float(rhs.split("*")[1])
    nx, ny = (int(t) for t in [ln for ln in lines if not ln.startswith("#")][1].split())
    q = np.frombuffer(data[pos:], dtype=">u2").reshape(ny, nx)[::-1].astype(float)
    out = lo + (q - 1) * step
    out[q == 0] = np.nan
    return out


def write_raster_csv(raster, path):
    lam = raster.grid.lam()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_re", "lambda_im", "L", "laplacian"])
        for i in range(lam.shape[0]):
            for j in range(lam.shape[1]):
                w.writerow([
                    repr(float(lam[i, j].real)), repr(float(lam[i, j].imag)),
                    repr(float(raster.L[i, j])), repr(float(raster.laplacian[i, j])),
                ])
