"""Device enumeration and host-parallel kernel dispatch.

The host backend runs kernels on a pool of OS threads.  numpy releases the
GIL inside its vector loops, which is where the kernels spend their time.
"""

from __future__ import annotations

import os
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Callable, Optional, Sequence, Union

from .errors import DeviceError, DispatchError, MeasurementWarning
from .kernels import split_range

HOST_DEVICE_ID = "host:cpu"
DEVICE_KINDS = ("cpu_host", "gpu_runtime", "other")


@dataclass(frozen=True)
class DeviceDescriptor:
    id: str
    kind: str
    name: str
    worker_count: int = 1
    supports_f64: bool = True

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise DeviceError(f"unknown device kind {self.kind!r}")
        if self.kind == "cpu_host" and self.worker_count < 1:
            raise DeviceError("host device needs at least one worker")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceDescriptor":
        return cls(**d)


@dataclass(frozen=True)
class TimingRecord:
    """Timing of one run.  All durations in nanoseconds."""

    kernel_ns: int
    transfer_ns: int
    wall_ns: int
    iterations: int

    def __post_init__(self):
        if min(self.kernel_ns, self.transfer_ns, self.wall_ns) < 0:
            raise ValueError("durations must be nonnegative")
        if self.kernel_ns > self.wall_ns:
            raise ValueError("kernel_ns exceeds wall_ns")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def time_to_solution_ns(self) -> int:
        """Kernel plus transfer time, the default reported metric."""
        return self.kernel_ns + self.transfer_ns

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TimingRecord":
        return cls(**d)


def host_thread_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def _probe_runtime_devices() -> list[DeviceDescriptor]:
    try:
        import pyopencl as cl  # type: ignore
    except ImportError:
        return []
    found = []
    for pi, platform in enumerate(cl.get_platforms()):
        for di, dev in enumerate(platform.get_devices()):
            kind = "gpu_runtime" if dev.type & cl.device_type.GPU else "other"
            found.append(
                DeviceDescriptor(
                    id=f"ocl:{pi}:{di}",
                    kind=kind,
                    name=f"{platform.name.strip()} / {dev.name.strip()}",
                    worker_count=int(dev.max_compute_units),
                    supports_f64="cl_khr_fp64" in dev.extensions,
                )
            )
    return found


def enumerate_devices(worker_count: Optional[int] = None, probe_runtime: bool = True
                      ) -> list[DeviceDescriptor]:
    """List available devices; the host device always comes first.

    ``worker_count`` (or the ``ERGMARK_WORKERS`` environment variable)
    overrides the detected hardware thread count.  Runtime probing problems
    are downgraded to a warning.
    """
    if worker_count is None:
        env = os.environ.get("ERGMARK_WORKERS")
        worker_count = int(env) if env else host_thread_count()
    devices = [
        DeviceDescriptor(
            id=HOST_DEVICE_ID,
            kind="cpu_host",
            name=f"host CPU ({worker_count} worker threads)",
            worker_count=worker_count,
            supports_f64=True,
        )
    ]
    if probe_runtime:
        try:
            devices.extend(_probe_runtime_devices())
        except Exception as exc:  # vendor runtimes fail in many creative ways
            warnings.warn(f"runtime device probing failed: {exc}", MeasurementWarning)
    return devices


def find_device(device_id: Optional[str] = None, worker_count: Optional[int] = None
                ) -> DeviceDescriptor:
    device_id = device_id or HOST_DEVICE_ID
    for dev in enumerate_devices(worker_count, probe_runtime=device_id != HOST_DEVICE_ID):
        if dev.id == device_id:
            return dev
    raise DeviceError(f"no device with id {device_id!r}")


_pools: dict[int, ThreadPoolExecutor] = {}
_pools_lock = threading.Lock()


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pools_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="ergmark-worker")
            _pools[workers] = pool
        return pool


class HostBackend:
    """Executes index-space kernels on ``device.worker_count`` threads."""

    def __init__(self, device: DeviceDescriptor):
        if device.kind != "cpu_host":
            raise DeviceError(
                f"device {device.id!r} ({device.kind}) has no execution backend in this build"
            )
        self.device = device
        self.workers = device.worker_count

    def partitions(self, extent: int) -> list[tuple[int, int]]:
        return split_range(extent, self.workers)

    def parallel_for(self, block: Callable[[int, int], Any], extent: int) -> list:
        """Run ``block(lo, hi)`` over every partition and wait for all of them."""
        parts = self.partitions(extent)
        if len(parts) == 1:
            lo, hi = parts[0]
            try:
                return [block(lo, hi)]
            except Exception as exc:
                raise DispatchError(f"kernel failed on indices [{lo}, {hi}): {exc}",
                                    (lo, hi)) from exc
        pool = _pool(self.workers)
        futures = [pool.submit(block, lo, hi) for lo, hi in parts]
        results = []
        failure = None
        for (lo, hi), fut in zip(parts, futures):
            try:
                results.append(fut.result())
            except Exception as exc:
                if failure is None:
                    failure = DispatchError(f"kernel failed on indices [{lo}, {hi}): {exc}",
                                            (lo, hi))
                    failure.__cause__ = exc
        if failure is not None:
            raise failure
        return results


def get_backend(device: DeviceDescriptor) -> HostBackend:
    return HostBackend(device)


def _extent_rows(extent: Union[int, Sequence[int]]) -> int:
    if isinstance(extent, int):
        rows = extent
    else:
        dims = list(extent)
        if not 1 <= len(dims) <= 2:
            raise DispatchError("range must be 1D or 2D")
        if any(d < 1 for d in dims):
            raise DispatchError(f"empty range {dims}")
        rows = dims[0]
    if rows < 1:
        raise DispatchError(f"empty range {extent}")
    return rows


def dispatch(
    kernel: Callable[[int, int], Any],
    extent: Union[int, Sequence[int]],
    device: DeviceDescriptor,
    iterations: int = 1,
) -> tuple[list, TimingRecord]:
    """Execute ``kernel`` over ``extent`` on ``device`` ``iterations`` times.

    A 2D extent is partitioned by rows.  ``kernel_ns`` is the sum of the
    per-iteration parallel regions, each closed by the completion barrier.
    Returns the per-partition outputs of the last iteration and the timing.
    """
    wall0 = time.perf_counter_ns()
    if iterations < 1:
        raise DispatchError("iterations must be >= 1")
    rows = _extent_rows(extent)
    backend = get_backend(device)
    kernel_ns = 0
    outputs: list = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        outputs = backend.parallel_for(kernel, rows)
        kernel_ns += time.perf_counter_ns() - t0
    wall = time.perf_counter_ns() - wall0
    return outputs, TimingRecord(kernel_ns=kernel_ns, transfer_ns=0, wall_ns=wall,
                                 iterations=iterations)


def run_timed(step: Callable[[], Any], iterations: int) -> tuple[Any, TimingRecord, list[int]]:
    """Time ``iterations`` back-to-back calls of a composite workload step.

    Returns the last result, the timing record and the per-iteration ns.
    """
    wall0 = time.perf_counter_ns()
    if iterations < 1:
        raise DispatchError("iterations must be >= 1")
    per_iter = []
    result = None
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        result = step()
        per_iter.append(time.perf_counter_ns() - t0)
    wall = time.perf_counter_ns() - wall0
    return result, TimingRecord(kernel_ns=sum(per_iter), transfer_ns=0, wall_ns=wall,
                                iterations=iterations), per_iter
