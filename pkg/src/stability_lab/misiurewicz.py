"""Misiurewicz parameters: critical orbits landing transversally on repelling cycles.

For one marked critical point ``c(lambda)`` the collision function is
``h(lambda) = f_lambda^q(c(lambda)) - w(lambda)`` with ``w`` a repelling
point of period ``p`` followed by the implicit function theorem.  This is
the one-parameter (``m = 1``) specialization of the Misiurewicz condition.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import projective as pj
from .family import FamilyError
from .lyapunov import repelling_cycles
from .postcritical import TAU_LAPLACIAN
from .stats import substream

RESIDUAL_MAX = 1e-9
TRANSVERSAL_MIN = 1e-6
DEDUP = 1e-8
DEFINITION = "m=1 specialization: transversal collision h(lambda*) = 0, h'(lambda*) != 0"


class CycleContinuationError(FamilyError):
    """The continued cycle stopped being repelling (or was lost)."""


class OutOfRasterError(FamilyError):
    pass


@dataclass(frozen=True)
class MisiurewiczHit:
    lam: complex
    q: int
    p: int
    residual: float
    transversality: float
    multiplier_modulus: float
    critical_index: int
    cycle_point: complex
    h_prime: complex
    iterations: int

    def to_json(self):
        d = asdict(self)
        for key in ("lam", "cycle_point", "h_prime"):
            d[key] = [self.__dict__[key].real, self.__dict__[key].imag]
        return d


class HitList(list):
    """Hits plus counts of starts that were rejected."""

    def __init__(self, hits=(), n_starts=0, n_nonconverged=0, n_degenerate=0,
                 n_cycle_failures=0):
        super().__init__(hits)
        self.n_starts = n_starts
        self.n_nonconverged = n_nonconverged
        self.n_degenerate = n_degenerate
        self.n_cycle_failures = n_cycle_failures

    def summary(self):
        return {"n_starts": self.n_starts, "n_hits": len(self),
                "n_nonconverged": self.n_nonconverged, "n_degenerate": self.n_degenerate,
                "n_cycle_failures": self.n_cycle_failures, "definition": DEFINITION}


def orbit_jet(family, lam, z, n):
    """``f_lambda^n(z)`` in the affine chart with ``d/dz`` and ``d/dlambda`` (forward mode)."""
    x = pj.lift_affine(complex(z))
    tz = np.array([1.0, 0.0], dtype=complex)
    tl = np.zeros(2, dtype=complex)
    for _ in range(n):
        f, jac, flam = family.lift_jet(lam, x)
        tz = jac @ tz
        tl = jac @ tl + flam
        x, tz, tl = pj.rescale(f, tz, tl)
    x1 = x[1]
    if abs(x1) < 1e-300:
        raise FamilyError("orbit reached infinity")
    v = x[0] / x1
    dz = (tz[0] * x1 - x[0] * tz[1]) / x1**2
    dl = (tl[0] * x1 - x[0] * tl[1]) / x1**2
    return complex(v), complex(dz), complex(dl)


def _finite_critical(family, lam):
    c = family.critical_points(complex(lam))
    fin = np.abs(c[:, 1]) > 1e-12
    return np.where(fin, c[:, 0] / np.where(fin, c[:, 1], 1.0), np.inf)


def critical_jet(family, lam, near, rho=None, n=8):
    """Critical point nearest ``near`` and its lambda-derivative (Cauchy formula on a small circle)."""
    lam = complex(lam)
    c = _finite_critical(family, lam)
    c0 = c[np.argmin(np.abs(c - near))]
    rho = 1e-4 * (1.0 + abs(lam)) if rho is None else rho
    th = 2 * math.pi * np.arange(n) / n
    acc = 0.0
    for t in th:
        cc = _finite_critical(family, lam + rho * np.exp(1j * t))
        acc += cc[np.argmin(np.abs(cc - c0))] * np.exp(-1j * t)
    return complex(c0), complex(acc / (n * rho))


def continue_cycle(family, lam, w, p, tol=1e-14, max_iter=50):
    """Newton-correct the period-``p`` point ``w`` at ``lam``; returns ``(w, multiplier, dw/dlambda)``."""
    for _ in range(max_iter):
        u, du, dl = orbit_jet(family, lam, w, p)
        step = (u - w) / (du - 1.0)
        w = w - step
        if abs(step) <= tol * (1.0 + abs(w)):
            break
    else:
        raise CycleContinuationError("cycle Newton did not converge")
    u, du, dl = orbit_jet(family, lam, w, p)
    if not abs(du) > 1.0:
        raise CycleContinuationError(f"cycle not repelling (|multiplier| = {abs(du):.3g})")
    return w, du, dl / (1.0 - du)


def exact_period(family, lam, w, p, tol=1e-9):
    for j in range(1, p + 1):
        if p % j == 0 and abs(orbit_jet(family, lam, w, j)[0] - w) <= tol * (1 + abs(w)):
            return j
    return p


def _start_cycle_point(family, lam, target, p):
    best, dist = None, np.inf
    for cyc in repelling_cycles(family, lam, p):
        z = pj.affine(pj.normalize(cyc.coords))
        for v in np.atleast_1d(z):
            if np.isfinite(v) and abs(v - target) < dist:
                best, dist = complex(v), abs(v - target)
    if best is None:
        raise CycleContinuationError("no repelling cycle of this period at the start")
    return best


def newton_misiurewicz(family, lam0, q, p, crit_near, w0=None, tol=1e-14, max_iter=60):
    """Newton on ``h(lambda) = f^q(c(lambda)) - w(lambda)`` from ``lam0``."""
    lam = complex(lam0)
    c, _ = critical_jet(family, lam, crit_near)
    if w0 is None:
        w0 = _start_cycle_point(family, lam, orbit_jet(family, lam, c, q)[0], p)
    w = complex(w0)
    for it in range(1, max_iter + 1):
        c, dc = critical_jet(family, lam, c)
        v, vz, vl = orbit_jet(family, lam, c, q)
        w, mult, dw = continue_cycle(family, lam, w, p)
        h = v - w
        hp = vz * dc + vl - dw
        if hp == 0:
            return lam, h, hp, w, mult, c, it, False
        step = h / hp
        lam = lam - step
        if not np.isfinite(lam):
            return lam, h, hp, w, mult, c, it, False
        if abs(step) <= tol * (1.0 + abs(lam)):
            break
    else:
        return lam, h, hp, w, mult, c, max_iter, False
    c, dc = critical_jet(family, lam, c)
    v, vz, vl = orbit_jet(family, lam, c, q)
    w, mult, dw = continue_cycle(family, lam, w, p)
    return lam, v - w, vz * dc + vl - dw, w, mult, c, it, True


def find_misiurewicz(family, rect, q, p, n_starts=8, seed=0, starts=None):
    """Misiurewicz hits from seeded starts in ``rect`` (a Window or ``(re0, re1, im0, im1)``).

    Every finite critical point is tried from every start.  Hits must have
    residual below ``1e-9``, transversality above ``1e-6`` and a repelling
    cycle; they are deduplicated within ``1e-8``.
    """
    if family.k != 1:
        raise FamilyError("Misiurewicz detection is implemented for k = 1")
    if hasattr(rect, "params"):
        if rect.kind == "rect":
            re0, re1, im0, im1 = rect.params
        else:
            x, y, r = rect.params
            re0, re1, im0, im1 = x - r, x + r, y - r, y + r
    else:
        re0, re1, im0, im1 = rect
    if starts is None:
        u = substream(seed, 0).random((n_starts, 2))
        starts = re0 + (re1 - re0) * u[:, 0] + 1j * (im0 + (im1 - im0) * u[:, 1])
    starts = np.atleast_1d(np.asarray(starts, dtype=complex))
    found = []
    nonconv = degenerate = cyc_fail = 0
    for s in starts:
        crit = _finite_critical(family, s)
        for ci, c0 in enumerate(crit):
            if not np.isfinite(c0):
                continue
            try:
                lam, h, hp, w, mult, _, it, ok = newton_misiurewicz(family, s, q, p, c0)
            except CycleContinuationError:
                cyc_fail += 1
                continue
            except FamilyError:
                nonconv += 1
                continue
            if not np.isfinite(lam) or abs(hp) <= TRANSVERSAL_MIN:
                degenerate += 1
                continue
            if not ok or abs(h) >= RESIDUAL_MAX:
                nonconv += 1
                continue
            found.append(MisiurewiczHit(
                complex(lam), q, exact_period(family, lam, w, p), float(abs(h)), float(abs(hp)),
                float(abs(mult)), ci, complex(w), complex(hp), it))
    found.sort(key=lambda h: (round(h.lam.real, 9), round(h.lam.imag, 9), h.critical_index))
    hits = []
    for h in found:
        if all(abs(h.lam - g.lam) > DEDUP for g in hits):
            hits.append(h)
    return HitList(hits, len(starts), nonconv, degenerate, cyc_fail)


def laplacian_mass_near(raster, lam, radius_cells):
    grid = raster.grid
    lam = complex(lam)
    if not grid.contains(lam):
        raise OutOfRasterError(f"{lam} is outside the raster")
    idx = int(grid.index_of(lam))
    iy, ix = divmod(idx, grid.nx)
    r = int(radius_cells)
    block = raster.laplacian[max(iy - r, 0): iy + r + 1, max(ix - r, 0): ix + r + 1]
    return float(np.nansum(np.abs(block)))


def check_in_bifurcation(hits, bif_raster, radius_cells=2, tau=TAU_LAPLACIAN):
    """Per hit: is the summed ``|laplacian|`` within ``radius_cells`` above ``tau``?"""
    out = []
    for h in hits:
        lam = h.lam if hasattr(h, "lam") else complex(h)
        out.append(laplacian_mass_near(bif_raster, lam, radius_cells) > tau)
    return out


def write_hits_json(hits, path, flags=None, meta=None):
    obj = dict(meta or {})
    rows = []
    for i, h in enumerate(hits):
        row = h.to_json()
        if flags is not None:
            row["in_bifurcation"] = bool(flags[i])
        rows.append(row)
    obj["hits"] = rows
    if isinstance(hits, HitList):
        obj["search"] = hits.summary()
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_hits_csv(hits, path, flags=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_re", "lambda_im", "q", "p", "residual", "transversality",
                    "multiplier_modulus", "in_bifurcation"])
        for i, h in enumerate(hits):
            w.writerow([repr(h.lam.real), repr(h.lam.imag), h.q, h.p, repr(h.residual),
                        repr(h.transversality), repr(h.multiplier_modulus),
                        "" if flags is None else int(bool(flags[i]))])
