"""Slow, independent reference implementations used to verify kernel output.

These deliberately avoid the code paths in :mod:`ergmark.kernels`: plain
sorting instead of selection, sequential compensated summation instead of a
partitioned reduction, a shift-and-add double loop instead of per-lag dots,
and ``np.roll`` stencils evaluated serially in float64.
"""

from __future__ import annotations

import numpy as np


def median_filter_oracle(img: np.ndarray, n: int) -> np.ndarray:
    """Sort every clamped window in pure Python and take the middle element."""
    img = np.asarray(img)
    h, w = img.shape
    half = n // 2
    rows = img.tolist()
    out = np.empty_like(img)
    for r in range(h):
        for c in range(w):
            window = []
            for dr in range(-half, half + 1):
                rr = min(max(r + dr, 0), h - 1)
                row = rows[rr]
                for dc in range(-half, half + 1):
                    window.append(row[min(max(c + dc, 0), w - 1)])
            window.sort()
            out[r, c] = window[len(window) // 2]
    return out


def kahan_dot(x: np.ndarray, y: np.ndarray) -> float:
    """Sequential Kahan-compensated sum of elementwise float64 products."""
    prods = (np.asarray(x, dtype=np.float64) * np.asarray(y, dtype=np.float64)).tolist()
    total = 0.0
    comp = 0.0
    for p in prods:
        yk = p - comp
        t = total + yk
        comp = (t - total) - yk
        total = t
    return total


def naive_cross_correlation(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """O(N*M) correlation over all lags -(N-1)..M-1, accumulated in float64.

    The outer loop walks x; each x[i] contributes x[i]*y[j] to lag j - i.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = x.size, y.size
    r = np.zeros(n + m - 1)
    # lag k = j - i lives at index k + n - 1
    for i in range(n):
        start = n - 1 - i
        r[start : start + m] += x[i] * y
    return np.arange(-(n - 1), m), r


def upwind_reference(u: np.ndarray, vx: float, vy: float, dx: float, dy: float) -> np.ndarray:
    """Upwind advection operator written with whole-array rolls."""
    u = np.asarray(u, dtype=np.float64)
    if vx >= 0:
        ddx = (u - np.roll(u, 1, axis=0)) / dx
    else:
        ddx = (np.roll(u, -1, axis=0) - u) / dx
    if vy >= 0:
        ddy = (u - np.roll(u, 1, axis=1)) / dy
    else:
        ddy = (np.roll(u, -1, axis=1) - u) / dy
    return -(vx * ddx + vy * ddy)


def advection_reference(u0: np.ndarray, vx: float, vy: float, dt: float, steps: int,
                        dx: float | None = None, dy: float | None = None) -> np.ndarray:
    """Serial float64 SSPRK(3,3) advection, written in Butcher-increment form."""
    u = np.asarray(u0, dtype=np.float64).copy()
    dx = dx if dx is not None else 1.0 / u.shape[0]
    dy = dy if dy is not None else 1.0 / u.shape[1]

    def L(v):
        return upwind_reference(v, vx, vy, dx, dy)

    for _ in range(steps):
        k1 = L(u)
        k2 = L(u + dt * k1)
        k3 = L(u + dt * (k1 + k2) / 4.0)
        u = u + dt * (k1 + k2 + 4.0 * k3) / 6.0
    return u
