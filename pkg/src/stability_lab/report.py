"""Escape-time oracle and cross-criterion agreement of stability verdicts."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .family import FamilyError, ParamGrid, critical_marking
from .lyapunov import lyapunov_raster
from .postcritical import (TAU_LAPLACIAN, TAU_RATE, Window, convergence_map, growth_batch)

ESCAPE_ITER = 1000
ESCAPE_RADIUS = 1e3


def _critical_start(family, lam, rho=1e-7):
    """Finite critical points at each parameter with their lambda-derivatives (central differences)."""
    crit = family.critical_points(lam)                   # (..., 2d-2, 2)
    fin = np.abs(crit[..., 1]) > 1e-12
    z = np.where(fin, crit[..., 0] / np.where(fin, crit[..., 1], 1.0), 0.0)

    def matched(dl):
        c = family.critical_points(lam + dl)
        f = np.abs(c[..., 1]) > 1e-12
        v = np.where(f, c[..., 0] / np.where(f, c[..., 1], 1.0), np.inf)
        j = np.argmin(np.abs(v[..., None, :] - z[..., :, None]), axis=-1)
        return np.take_along_axis(v, j, axis=-1)

    dz = (matched(rho) - matched(-rho)) / (2 * rho)
    return z, np.where(fin & np.isfinite(dz), dz, 0.0), fin


def escape_time(family, grid, max_iter=ESCAPE_ITER, radius=ESCAPE_RADIUS):
    """Escape-time iteration of all finite critical orbits with a parameter tangent.

    Returns ``(bounded, distance)``: ``bounded`` marks cells whose critical
    orbits all stay bounded for ``max_iter`` steps (for ``z^2 + c`` the
    Mandelbrot set sampled at cell centres) and ``distance`` is the exterior
    distance estimate ``G / |grad G|`` of the first escaping orbit (0 on
    bounded cells).
    """
    if family.k != 1 or not family.is_polynomial():
        raise FamilyError("the escape-time oracle needs a polynomial family with k = 1")
    lam = grid.lam()[..., None]
    z, dz, fin = _critical_start(family, lam[..., 0])
    coeffs = family.affine_poly(lam)[..., 0, :]          # (ny, nx, d+1), highest power first
    h = 1e-7
    dcoef = (family.affine_poly(lam + h) - family.affine_poly(lam - h))[..., 0, :] / (2 * h)
    n = coeffs.shape[-1]
    shp = z.shape
    zf, dzf = z.reshape(-1), dz.reshape(-1)
    cf = np.broadcast_to(coeffs[..., None, :], shp + (n,)).reshape(-1, n)
    df = np.broadcast_to(dcoef[..., None, :], shp + (n,)).reshape(-1, n)
    live = np.nonzero(fin.reshape(-1))[0]
    bounded = fin.reshape(-1).copy()
    esc = np.full(zf.shape, np.inf)
    zl, dzl, cl, dl = zf[live], dzf[live], cf[live], df[live]
    for it in range(max_iter):
        p = np.zeros_like(zl)
        dp = np.zeros_like(zl)
        pl = np.zeros_like(zl)
        for j in range(n):
            dp = dp * zl + p
            p = p * zl + cl[:, j]
            pl = pl * zl + dl[:, j]
        dzl = dp * dzl + pl
        zl = p
        out = np.abs(zl) > radius
        if np.any(out):
            az = np.abs(zl[out])
            esc[live[out]] = az * np.log(az) / np.maximum(np.abs(dzl[out]), 1e-300)
            bounded[live[out]] = False
            keep = ~out
            live, zl, dzl, cl, dl = live[keep], zl[keep], dzl[keep], cl[keep], dl[keep]
        if live.size == 0:
            break
    bounded = bounded.reshape(shp)
    esc = esc.reshape(shp)
    all_bounded = np.all(bounded | ~fin, axis=-1)
    dist = np.where(all_bounded, 0.0, np.min(np.where(fin, esc, np.inf), axis=-1))
    return all_bounded, dist


def escape_time_mask(family, grid, max_iter=ESCAPE_ITER, radius=ESCAPE_RADIUS):
    return escape_time(family, grid, max_iter, radius)[0]


def oracle_boundary(mask, distance=None, cell=None):
    """Boundary cells of the escape-time set.

    A cell is a boundary cell if it has a 4-neighbour of the other kind, or
    (with ``distance`` and ``cell`` given) if it escapes but its exterior
    distance estimate is below one cell width; the latter catches filaments
    of zero area that no cell centre lands on.
    """
    m = np.asarray(mask, dtype=bool)
    b = np.zeros_like(m)
    b[1:, :] |= m[1:, :] != m[:-1, :]
    b[:-1, :] |= m[1:, :] != m[:-1, :]
    b[:, 1:] |= m[:, 1:] != m[:, :-1]
    b[:, :-1] |= m[:, 1:] != m[:, :-1]
    if distance is not None:
        b |= ~m & (distance <= cell)
    return b


def boundary_distance(mask, distance=None, cell=None):
    """Chessboard distance (in cells) to the nearest oracle boundary cell."""
    b = oracle_boundary(mask, distance, cell)
    if not np.any(b):
        return np.full(b.shape, np.iinfo(np.int32).max, dtype=np.int64)
    return ndimage.distance_transform_cdt(~b, metric="chessboard").astype(np.int64)


def oracle(family, grid, max_iter=ESCAPE_ITER):
    """``(bounded, boundary_distance)`` of the escape-time oracle on ``grid``."""
    mask, de = escape_time(family, grid, max_iter)
    return mask, boundary_distance(mask, de, max(grid.hx, grid.hy))


@dataclass
class OracleCheck:
    n_active: int
    n_near: int
    fraction: float
    radius_cells: int
    tau: float

    def to_json(self):
        return dict(self.__dict__)


def raster_vs_oracle(raster, family, tau=TAU_LAPLACIAN, radius_cells=2, max_iter=ESCAPE_ITER):
    """Fraction of cells with ``|laplacian| > tau`` lying within ``radius_cells`` of the oracle boundary."""
    _, dist = oracle(family, raster.grid, max_iter)
    active = np.isfinite(raster.laplacian) & (np.abs(np.nan_to_num(raster.laplacian)) > tau)
    near = active & (dist <= radius_cells)
    n = int(np.count_nonzero(active))
    return OracleCheck(n, int(np.count_nonzero(near)), float(near.sum() / n) if n else 1.0,
                       radius_cells, tau)


# ---------------------------------------------------------------------------
# the three verdicts
# ---------------------------------------------------------------------------

def laplacian_verdict(family, grid, supersample=4, tau=TAU_LAPLACIAN, threads=None, depth=60):
    """Per cell: summed ``|laplacian|`` of a supersampled Green-formula raster; stable if ``<= tau``."""
    s = int(supersample)
    fine = ParamGrid(grid.re0, grid.re1, grid.im0, grid.im1, grid.nx * s, grid.ny * s).expanded(1)
    r = lyapunov_raster(family, fine, "green", {"depth": depth}, threads=threads or 1)
    lap = np.abs(r.laplacian[1:-1, 1:-1])
    mass = lap.reshape(grid.ny, s, grid.nx, s).sum(axis=(1, 3))
    return mass <= tau, mass


def growth_verdict(family, grid, N_max=20, markings=None, n_base=4, degree_fallback=False,
                   rate_tol=TAU_RATE):
    """Per cell: post-critical mass growth rate over ``cell x P^1``; stable if resolved and ``rho <= rate_tol``."""
    if markings is None:
        markings = critical_marking(family, grid)
    wins = [Window.cell(grid, i) for i in range(grid.size)]
    fits = growth_batch(family, wins, N_max, markings, n_base,
                        degree_fallback=degree_fallback)
    rate = np.array([f.rate for f in fits]).reshape(grid.ny, grid.nx)
    stable = np.array([f.stable and f.rate <= rate_tol for f in fits]).reshape(grid.ny, grid.nx)
    return stable, rate, fits


def ramification_verdict(family, grid, N_max=20, markings=None, n_base=4, degree_fallback=False):
    """Per cell: verdict of the ramification series over the centred window ``cell x P^1``."""
    cmap = convergence_map(family, grid, [None], N_max, markings, n_base,
                           degree_fallback=degree_fallback)
    return cmap.converged(0), cmap


@dataclass
class AgreementReport:
    grid: ParamGrid
    oracle: np.ndarray
    distance: np.ndarray
    verdicts: dict               # name -> (ny, nx) bool, True = stable
    min_distance: int
    pairs: dict = field(default_factory=dict)
    n_off_boundary: int = 0

    def to_json(self):
        names = sorted(self.verdicts)
        off = self.distance >= self.min_distance
        return {
            "grid": [self.grid.re0, self.grid.re1, self.grid.im0, self.grid.im1,
                     self.grid.nx, self.grid.ny],
            "min_distance_cells": self.min_distance,
            "n_off_boundary": self.n_off_boundary,
            "pairwise_agreement": {k: v for k, v in sorted(self.pairs.items())},
            "stable_fraction_off_boundary": {
                n: float(np.mean(self.verdicts[n][off])) if off.any() else None for n in names},
        }

    def min_agreement(self):
        return min(self.pairs.values()) if self.pairs else 1.0


def agreement(grid, verdicts, bounded, dist, min_distance=2):
    off = dist >= min_distance
    names = sorted(verdicts)
    pairs = {}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            same = verdicts[a][off] == verdicts[b][off]
            pairs[f"{a}~{b}"] = float(same.mean()) if same.size else 1.0
    return AgreementReport(grid, bounded, dist, verdicts, min_distance, pairs,
                           int(np.count_nonzero(off)))


def stability_report(family, grid, N_max=20, supersample=4, n_base=4, min_distance=2,
                     threads=None, max_iter=ESCAPE_ITER):
    """All three verdicts on ``grid`` and their pairwise agreement away from the oracle boundary."""
    markings = critical_marking(family, grid)
    lap_ok, _ = laplacian_verdict(family, grid, supersample, threads=threads)
    gr_ok, _, _ = growth_verdict(family, grid, N_max, markings, n_base)
    ram_ok, _ = ramification_verdict(family, grid, N_max, markings, n_base)
    bounded, dist = oracle(family, grid, max_iter)
    return agreement(grid, {"laplacian": lap_ok, "growth": gr_ok, "ramification": ram_ok},
                     bounded, dist, min_distance)


def write_report_json(rep, path, meta=None):
    obj = dict(meta or {})
    obj.update(rep.to_json())
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def write_report_csv(rep, path):
    lam = rep.grid.lam()
    names = sorted(rep.verdicts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_re", "lambda_im", "oracle_bounded", "boundary_distance"] + names)
        for i in range(lam.shape[0]):
            for j in range(lam.shape[1]):
                w.writerow([repr(float(lam[i, j].real)), repr(float(lam[i, j].imag)),
                            int(rep.oracle[i, j]), int(rep.distance[i, j])]
                           + [int(rep.verdicts[n][i, j]) for n in names])
