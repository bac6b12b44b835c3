"""Canonical workload generation, execution and output verification."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels, oracles
from .backend import HostBackend
from .container import (
    BLOB_DTYPES,
    PRECISION_BLOB_DTYPE,
    WORKLOAD_BLOBS,
    WORKLOAD_PRECISIONS,
    DataBlob,
    Workload,
    WorkloadManifest,
)
from .errors import WorkloadError

SCALES = ("desk", "paper")

# Desk presets keep one run around 1-2 s on a single modern core.
PRESETS = {
    ("median2d", "desk"): ({"window_n": 3, "width": 512, "height": 512}, 24),
    ("median2d", "paper"): ({"window_n": 3, "width": 3840, "height": 2160}, 4000),
    ("dot", "desk"): ({"vector_len": 1 << 22}, 320),
    ("dot", "paper"): ({"vector_len": 1 << 25}, 2000),
    ("xcorr", "desk"): ({"vector_len": 4096, "lag_range": 4095}, 90),
    ("xcorr", "paper"): ({"vector_len": 1 << 16, "lag_range": 1 << 12}, 1000),
    ("rk2d", "desk"): ({"grid_nx": 256, "grid_ny": 256, "steps": 500,
                        "velocity_x": 1.0, "velocity_y": 0.5}, 3),
    ("rk2d", "paper"): ({"grid_nx": 1024, "grid_ny": 1024, "steps": 4000,
                         "velocity_x": 1.0, "velocity_y": 0.5}, 1),
}
DEFAULT_PRECISION = {"median2d": "int16", "dot": "f32", "xcorr": "f32", "rk2d": "f32"}
RK_CFL = 0.5


def make_workload(workload_id: str, scale: str = "desk", seed: int = 0,
                  precision: Optional[str] = None,
                  iterations: Optional[int] = None) -> tuple[WorkloadManifest, dict]:
    """Generate a canonical workload manifest and its blobs from a seeded RNG."""
    if scale not in SCALES:
        raise WorkloadError("bad_scale", f"unknown scale {scale!r}")
    if (workload_id, scale) not in PRESETS:
        raise WorkloadError("unknown_workload", f"unknown workload_id {workload_id!r}")
    precision = precision or DEFAULT_PRECISION[workload_id]
    if precision not in WORKLOAD_PRECISIONS[workload_id]:
        raise WorkloadError("unsupported_precision",
                            f"precision unsupported for workload: {workload_id} "
                            f"does not support {precision}")
    params, iters = PRESETS[(workload_id, scale)]
    params = dict(params)
    iters = iterations if iterations is not None else iters
    rng = np.random.default_rng(seed)
    dtype = BLOB_DTYPES[PRECISION_BLOB_DTYPE[precision]]

    if workload_id == "median2d":
        h, w = params["height"], params["width"]
        # smooth gradient plus salt-and-pepper noise, the filter's typical input
        base = np.add.outer(np.arange(h) * 20000 // h, np.arange(w) * 20000 // w)
        img = (base + rng.integers(0, 2000, (h, w))).astype(np.int64)
        salt = rng.random((h, w))
        img[salt < 0.02] = 0
        img[salt > 0.98] = 65535
        blobs = {"image": img.astype(dtype)}
    elif workload_id in ("dot", "xcorr"):
        n = params["vector_len"]
        x = rng.uniform(-1.0, 1.0, n)
        if workload_id == "xcorr":
            # y is a delayed noisy copy of x so the correlation has a clear peak
            shift = n // 8
            y = np.roll(x, shift) + 0.5 * rng.standard_normal(n)
        else:
            y = rng.uniform(-1.0, 1.0, n)
        blobs = {"x": x.astype(dtype), "y": y.astype(dtype)}
    else:
        nx, ny = params["grid_nx"], params["grid_ny"]
        vx, vy = params["velocity_x"], params["velocity_y"]
        params["dt"] = RK_CFL / (abs(vx) * nx + abs(vy) * ny)
        u0 = kernels.gaussian_bump(nx, ny, width=0.08) + 0.01 * rng.standard_normal((nx, ny))
        blobs = {"u0": u0.astype(dtype)}

    refs = tuple(DataBlob(name, PRECISION_BLOB_DTYPE[precision], tuple(blobs[name].shape))
                 for name in WORKLOAD_BLOBS[workload_id])
    manifest = WorkloadManifest(workload_id, precision, params, iters, refs)
    return manifest, blobs


def output_checksum(output: np.ndarray) -> str:
    arr = np.ascontiguousarray(output)
    return hashlib.sha256(arr.dtype.str.encode() + arr.tobytes()).hexdigest()


@dataclass
class Executable:
    """A workload bound to a backend; ``step()`` runs one iteration."""

    workload: Workload
    step: Callable[[], np.ndarray]


def bind(workload: Workload, backend: HostBackend) -> Executable:
    """Prepare a workload for repeated execution on ``backend``.

    Inputs are loaded once and reused by every iteration.
    """
    p = workload.params
    b = workload.blobs
    pf = backend.parallel_for
    wid = workload.workload_id

    if wid == "median2d":
        img, n = b["image"], p["window_n"]

        def step():
            return kernels.median_filter_2d(img, n, pf)
    elif wid == "dot":
        x, y = b["x"], b["y"]

        def step():
            return np.array([kernels.dot_product(x, y, parallel_for=pf)])
    elif wid == "xcorr":
        x, y, lag = b["x"], b["y"], p["lag_range"]

        def step():
            return kernels.cross_correlate(x, y, max_lag=lag, parallel_for=pf)[1]
    else:
        state = kernels.GridState(b["u0"], p["velocity_x"], p["velocity_y"], p["dt"])
        rhs = kernels.upwind_operator(state.vx, state.vy, state.dx, state.dy, pf)
        steps = p["steps"]

        def step():
            return kernels.run_simulation(state, steps, rhs).u
    return Executable(workload, step)


def verify_output(workload: Workload, output: np.ndarray) -> tuple[bool, str]:
    """Compare a workload output with its independent oracle."""
    p = workload.params
    b = workload.blobs
    wid = workload.workload_id
    if wid == "median2d":
        ref = oracles.median_filter_oracle(b["image"], p["window_n"])
        bad = int(np.count_nonzero(ref != output))
        return bad == 0, f"{bad} pixels differ from sort oracle"
    if wid == "dot":
        ref = oracles.kahan_dot(b["x"], b["y"])
        rel = abs(float(output[0]) - ref) / max(abs(ref), 1e-300)
        return rel <= 1e-5, f"relative error {rel:.3g} vs compensated sum"
    if wid == "xcorr":
        lags, ref = oracles.naive_cross_correlation(b["x"], b["y"])
        lag = p["lag_range"]
        keep = (lags >= -lag) & (lags <= lag)
        ref = ref[keep]
        rel = float(np.max(np.abs(output - ref)) / max(np.max(np.abs(ref)), 1e-300))
        return rel <= 1e-5, f"max error {rel:.3g} relative to peak"
    ref = oracles.advection_reference(b["u0"], p["velocity_x"], p["velocity_y"], p["dt"],
                                      p["steps"])
    rel = float(np.max(np.abs(output - ref)) / np.max(np.abs(ref)))
    tol = 1e-4 if workload.precision == "f32" else 1e-10
    return rel <= tol, f"max error {rel:.3g} relative to float64 reference"
