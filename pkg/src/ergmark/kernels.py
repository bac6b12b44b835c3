"""Data-parallel compute kernels for the four benchmark workloads.

Every kernel is pure over its inputs and is expressed over an index space
(rows of pixels, vector partitions, lags, grid rows).  A kernel accepts an
optional ``parallel_for`` callable with the signature
``parallel_for(block, extent) -> list`` where ``block(lo, hi)`` processes the
half-open index range ``[lo, hi)``; the returned list holds one entry per
partition in ascending index order.  Without it the kernel runs serially.

The advection workload stands in for a 2D PDE solved with SSPRK(3,3): linear
advection on a periodic unit grid, discretised with first-order upwinding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import KernelError, NumericalBlowUp

ParallelFor = Callable[[Callable[[int, int], object], int], list]
Rhs = Callable[[np.ndarray], np.ndarray]

# Rows processed per vectorised median chunk; bounds the n*n window copy.
_MEDIAN_CHUNK_ROWS = 64
# Elements per float64 staging chunk in the dot product (stays cache-resident).
_DOT_CHUNK = 1 << 14


def _serial(block, extent):
    return [block(0, extent)]


def split_range(extent: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous block partition of ``range(extent)``.

    The remainder goes to the lowest-index partitions, so 10 indices over 3
    parts gives sizes 4, 3, 3.  Never returns empty partitions.
    """
    if extent < 1:
        raise KernelError("extent must be positive")
    parts = max(1, min(parts, extent))
    base, rem = divmod(extent, parts)
    out = []
    lo = 0
    for p in range(parts):
        hi = lo + base + (1 if p < rem else 0)
        out.append((lo, hi))
        lo = hi
    return out


# --------------------------------------------------------------------------
# median filter


def median_filter_2d(
    img: np.ndarray, n: int = 3, parallel_for: Optional[ParallelFor] = None
) -> np.ndarray:
    """Median of the n x n clamp-to-edge window around every pixel.

    ``img`` is a 2D unsigned 16-bit image (rows x columns).  Only integer
    operations are used; the input is left untouched.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise KernelError("median filter expects a 2D image")
    if img.dtype.kind not in "ui":
        raise KernelError(f"median filter is integer-only, got dtype {img.dtype}")
    if n < 3 or n % 2 == 0:
        raise KernelError(f"window size must be odd and >= 3, got {n}")
    height, width = img.shape
    if n > 2 * min(width, height) - 1:
        raise KernelError(
            f"window {n} too large for {width}x{height} image "
            f"(max {2 * min(width, height) - 1})"
        )
    half = n // 2
    padded = np.pad(img, half, mode="edge")
    out = np.empty_like(img)
    pf = parallel_for or _serial

    def block(lo: int, hi: int) -> None:
        _median_rows(padded, n, out, lo, hi)

    pf(block, height)
    return out


def _median_rows(padded: np.ndarray, n: int, out: np.ndarray, lo: int, hi: int) -> None:
    mid = (n * n) // 2
    width = out.shape[1]
    for r0 in range(lo, hi, _MEDIAN_CHUNK_ROWS):
        r1 = min(hi, r0 + _MEDIAN_CHUNK_ROWS)
        src = padded[r0 : r1 + n - 1]
        windows = np.lib.stride_tricks.sliding_window_view(src, (n, n))
        flat = windows.reshape(r1 - r0, width, n * n)
        # np.partition is an nth-element selection; it copies.
        out[r0:r1] = np.partition(flat, mid, axis=-1)[..., mid]


# --------------------------------------------------------------------------
# dot product


def dot_product(
    x: np.ndarray,
    y: np.ndarray,
    partitions: int = 1,
    parallel_for: Optional[ParallelFor] = None,
) -> float:
    """Two-phase reduction: per-partition partial sums, then an ordered sum.

    Partials are accumulated in float64, chunk by chunk, and reduced in
    ascending partition order, so the result is reproducible for a fixed
    partition count.  When
    ``parallel_for`` is given it decides the partitioning and ``partitions``
    is ignored.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 1 or y.ndim != 1:
        raise KernelError("dot product expects 1D vectors")
    if x.shape != y.shape:
        raise KernelError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] == 0:
        raise KernelError("dot product of empty vectors")

    def block(lo: int, hi: int) -> float:
        acc = 0.0
        for c0 in range(lo, hi, _DOT_CHUNK):
            c1 = min(hi, c0 + _DOT_CHUNK)
            acc += float(np.dot(x[c0:c1].astype(np.float64), y[c0:c1].astype(np.float64)))
        return acc

    if parallel_for is None:
        partials = [block(lo, hi) for lo, hi in split_range(x.shape[0], partitions)]
    else:
        partials = parallel_for(block, x.shape[0])
    total = 0.0
    for p in partials:
        total += p
    return total


# --------------------------------------------------------------------------
# cross-correlation


def correlation_lags(n: int, m: int, max_lag: Optional[int] = None) -> np.ndarray:
    """Lags k with a nonempty overlap of x[i] and y[i + k]."""
    lo, hi = -(n - 1), m - 1
    if max_lag is not None:
        lo, hi = max(lo, -max_lag), min(hi, max_lag)
    return np.arange(lo, hi + 1)


def cross_correlate(
    x: np.ndarray,
    y: np.ndarray,
    normalized: bool = False,
    max_lag: Optional[int] = None,
    parallel_for: Optional[ParallelFor] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sliding dot product ``r[k] = sum_i x[i] * y[i + k]``.

    Returns ``(lags, r)``.  Each lag is computed independently and
    accumulated in float64; ``r`` has the input dtype (float32 for the
    benchmark).  With ``normalized=True`` each lag is divided by the L2
    norms of the two overlapping segments, and a zero-norm overlap gives 0.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != 1 or y.ndim != 1 or x.size == 0 or y.size == 0:
        raise KernelError("cross-correlation expects two nonempty 1D signals")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise KernelError("signals must be finite")
    n, m = x.shape[0], y.shape[0]
    lags = correlation_lags(n, m, max_lag)
    if lags.size == 0:
        raise KernelError(f"no lags within max_lag={max_lag}")
    xd = x.astype(np.float64)
    yd = y.astype(np.float64)
    out_dtype = x.dtype if x.dtype.kind == "f" else np.float64
    out = np.empty(lags.size, dtype=out_dtype)

    def block(lo: int, hi: int) -> None:
        for j in range(lo, hi):
            k = int(lags[j])
            i0 = max(0, -k)
            i1 = min(n, m - k)
            xs = xd[i0:i1]
            ys = yd[i0 + k : i1 + k]
            v = float(np.dot(xs, ys))
            if normalized:
                norm = float(np.sqrt(np.dot(xs, xs)) * np.sqrt(np.dot(ys, ys)))
                v = v / norm if norm > 0.0 else 0.0
            out[j] = v

    (parallel_for or _serial)(block, lags.size)
    return lags, out


# --------------------------------------------------------------------------
# 2D advection + SSPRK(3,3)


@dataclass(frozen=True)
class GridState:
    """Scalar field on a periodic nx x ny grid advected at constant velocity.

    Axis 0 of ``u`` is x, axis 1 is y.  Grid spacing defaults to the unit
    square (dx = 1/nx, dy = 1/ny).
    """

    u: np.ndarray
    vx: float
    vy: float
    dt: float
    t: float = 0.0
    dx: Optional[float] = None
    dy: Optional[float] = None

    def __post_init__(self):
        u = np.asarray(self.u)
        if u.ndim != 2 or u.shape[0] < 1 or u.shape[1] < 1:
            raise KernelError("grid field must be a nonempty 2D array")
        if u.dtype not in (np.float32, np.float64):
            raise KernelError(f"grid field must be float32 or float64, got {u.dtype}")
        object.__setattr__(self, "u", u)
        if self.dx is None:
            object.__setattr__(self, "dx", 1.0 / u.shape[0])
        if self.dy is None:
            object.__setattr__(self, "dy", 1.0 / u.shape[1])
        if not self.dt > 0:
            raise KernelError(f"dt must be positive, got {self.dt}")
        if not np.isfinite(u).all():
            raise KernelError("grid field contains non-finite values")
        if self.cfl > 1.0 + 1e-12:
            raise KernelError(f"CFL number {self.cfl:.4g} exceeds 1")

    @property
    def nx(self) -> int:
        return self.u.shape[0]

    @property
    def ny(self) -> int:
        return self.u.shape[1]

    @property
    def cfl(self) -> float:
        return abs(self.vx) * self.dt / self.dx + abs(self.vy) * self.dt / self.dy


def upwind_operator(
    vx: float,
    vy: float,
    dx: float,
    dy: float,
    parallel_for: Optional[ParallelFor] = None,
) -> Rhs:
    """Spatial operator L(u) = -(vx du/dx + vy du/dy), first-order upwind, periodic."""
    pf = parallel_for or _serial

    def rhs(u: np.ndarray) -> np.ndarray:
        cx = u.dtype.type(vx / dx)
        cy = u.dtype.type(vy / dy)
        out = np.empty_like(u)
        nx = u.shape[0]

        def block(lo: int, hi: int) -> None:
            rows = u[lo:hi]
            if vx >= 0:
                nb = u[np.arange(lo - 1, hi - 1) % nx]
                ddx = rows - nb
            else:
                nb = u[np.arange(lo + 1, hi + 1) % nx]
                ddx = nb - rows
            if vy >= 0:
                ddy = rows - np.roll(rows, 1, axis=1)
            else:
                ddy = np.roll(rows, -1, axis=1) - rows
            out[lo:hi] = -(cx * ddx) - cy * ddy

        pf(block, nx)
        return out

    return rhs


def advect_rhs(state: GridState, parallel_for: Optional[ParallelFor] = None) -> np.ndarray:
    """Evaluate the upwind advection operator on ``state.u``."""
    return upwind_operator(state.vx, state.vy, state.dx, state.dy, parallel_for)(state.u)


def _check_finite(a: np.ndarray, stage: int) -> None:
    if not np.isfinite(a).all():
        raise NumericalBlowUp(f"numerical blow-up: non-finite values in stage {stage}")


def ssprk33_update(u: np.ndarray, h: float, rhs: Rhs) -> np.ndarray:
    """One Shu-Osher SSPRK(3,3) step of size ``h`` for u' = rhs(u)."""
    u1 = u + h * rhs(u)
    _check_finite(u1, 1)
    u2 = 0.75 * u + 0.25 * (u1 + h * rhs(u1))
    _check_finite(u2, 2)
    u3 = u / 3.0 + 2.0 * (u2 + h * rhs(u2)) / 3.0
    _check_finite(u3, 3)
    return u3


def ssprk33_step(state: GridState, rhs: Optional[Rhs] = None) -> GridState:
    """Advance ``state`` by one timestep; ``rhs`` defaults to upwind advection."""
    if rhs is None:
        rhs = upwind_operator(state.vx, state.vy, state.dx, state.dy)
    h = state.u.dtype.type(state.dt)
    u = ssprk33_update(state.u, h, rhs)
    return replace(state, u=u, t=state.t + state.dt)


def run_simulation(
    state: GridState,
    steps: int,
    rhs: Optional[Rhs] = None,
    step_times: Optional[list] = None,
) -> GridState:
    """Apply ``steps`` SSPRK(3,3) advection steps.

    When ``step_times`` is a list, the wall time of every step (ns) is
    appended to it.
    """
    if steps < 1:
        raise KernelError(f"steps must be >= 1, got {steps}")
    if rhs is None:
        rhs = upwind_operator(state.vx, state.vy, state.dx, state.dy)
    h = state.u.dtype.type(state.dt)
    u = state.u
    for k in range(steps):
        t0 = time.perf_counter_ns()
        try:
            u = ssprk33_update(u, h, rhs)
        except NumericalBlowUp as exc:
            raise NumericalBlowUp(f"{exc} at step {k}", step=k) from None
        if step_times is not None:
            step_times.append(time.perf_counter_ns() - t0)
    return replace(state, u=u, t=state.t + steps * state.dt)


def gaussian_bump(nx: int, ny: int, width: float = 0.1, offset: float = 1.0,
                  dtype=np.float64) -> np.ndarray:
    """Smooth periodic-friendly initial field centred in the unit square."""
    x = (np.arange(nx) + 0.5) / nx
    y = (np.arange(ny) + 0.5) / ny
    xx, yy = np.meshgrid(x, y, indexing="ij")
    r2 = (xx - 0.5) ** 2 + (yy - 0.5) ** 2
    return (offset + np.exp(-r2 / (2 * width**2))).astype(dtype)


def lag_index(lags: Sequence[int], k: int) -> int:
    """Position of lag ``k`` in a lag array returned by :func:`cross_correlate`."""
    return int(k - lags[0])
