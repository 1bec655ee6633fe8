"""Small statistics helpers: weighted KS distance, fits, seeded substreams."""
from __future__ import annotations

import math

import numpy as np


def substream(seed, *key):
    """Generator for the named substream ``key`` of ``seed``.

    Streams depend only on ``(seed, key)``, so work split across workers in
    any order reproduces serial results.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    else:
        ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.default_rng(ss)


def ks_distance(a, b, wa=None, wb=None):
    """Sup distance between two (weighted) empirical CDFs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    wa = np.full(a.size, 1.0 / a.size) if wa is None else np.asarray(wa, float) / np.sum(wa)
    wb = np.full(b.size, 1.0 / b.size) if wb is None else np.asarray(wb, float) / np.sum(wb)
    grid = np.concatenate([a, b])
    grid.sort()
    ia = np.argsort(a)
    ib = np.argsort(b)
    ca = np.concatenate([[0.0], np.cumsum(wa[ia])])
    cb = np.concatenate([[0.0], np.cumsum(wb[ib])])
    fa = ca[np.searchsorted(a[ia], grid, side="right")]
    fb = cb[np.searchsorted(b[ib], grid, side="right")]
    return float(np.max(np.abs(fa - fb)))


def ks_against_cdf(x, cdf):
    """One-sample KS statistic of ``x`` against a continuous CDF."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    f = cdf(x)
    hi = np.arange(1, n + 1) / n - f
    lo = f - np.arange(n) / n
    return float(max(np.max(hi), np.max(lo)))


def linear_fit(x, y):
    """Least-squares line; returns ``(slope, intercept, rms_residual)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return 0.0, float(y[0]) if y.size else 0.0, 0.0
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return float(coef[0]), float(coef[1]), float(math.sqrt(np.mean(res**2)))


def fsum(values):
    """Order-independent (exactly rounded) sum."""
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())
