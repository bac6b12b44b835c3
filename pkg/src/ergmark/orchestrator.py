"""Measurement protocol: baseline, warm-up, sampled runs, gating, persistence."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from . import backend as backend_mod
from .backend import TimingRecord, run_timed
from .container import (
    WORKLOAD_IDS,
    ResultBundle,
    canonical_json,
    fnv1a64_hex,
    RunRecord,
    Workload,
    read_results,
    read_workload,
    write_results,
)
from .energy import (
    MIN_RUNS,
    aggregate_runs,
    compute_energy,
    correction_chain,
)
from .errors import ErgmarkError, InsufficientDataError, MeasurementWarning, ProviderError
from .power import DEFAULT_RATE_HZ, PowerProvider, PowerTrace, measure_baseline, now_ns
from .workloads import bind, make_workload, output_checksum, verify_output

log = logging.getLogger(__name__)

WINDOW_MODES = ("kernel", "extended")


@dataclass
class RunConfig:
    workload: Union[str, Path, Workload]
    device_id: str = backend_mod.HOST_DEVICE_ID
    runs: int = MIN_RUNS
    iterations: Optional[int] = None
    warmup_iterations: int = 1
    provider: Optional[PowerProvider] = None
    provider_name: str = "none"
    sample_hz: float = DEFAULT_RATE_HZ
    baseline_seconds: float = 5.0
    psu_efficiency: Optional[float] = None
    legacy_external: bool = False
    window: str = "kernel"
    tail_seconds: float = 1.0
    out: Optional[Path] = None
    verify: bool = False
    allow_fewer_runs: bool = False
    worker_count: Optional[int] = None
    scale: str = "desk"
    seed: int = 0
    # run index -> extra fraction of each iteration's time (test hook)
    slowdown: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.runs < MIN_RUNS and not self.allow_fewer_runs:
            raise ValueError(f"at least {MIN_RUNS} runs are required "
                             "(use allow_fewer_runs for non-conforming results)")
        if self.window not in WINDOW_MODES:
            raise ValueError(f"window must be one of {WINDOW_MODES}")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def conforming(self) -> bool:
        return self.runs >= MIN_RUNS


@dataclass(frozen=True)
class AlignedWindow:
    window: tuple[int, int]
    coverage: float

    @property
    def degraded(self) -> bool:
        return self.coverage < 1.0


def align_trace_to_window(
    trace: PowerTrace,
    timing: TimingRecord,
    anchors: tuple[int, int],
    mode: str = "kernel",
    tail_ns: int = 0,
) -> AlignedWindow:
    """Energy window from the run anchors (same monotonic clock as the trace).

    ``extended`` mode appends ``tail_ns`` after the stop anchor to catch the
    power decay after the kernels finish.  Coverage is the fraction of the
    window spanned by the trace.
    """
    start, stop = int(anchors[0]), int(anchors[1])
    if stop <= start:
        raise ValueError("stop anchor must follow start anchor")
    if timing.kernel_ns > stop - start:
        raise ValueError("kernel time exceeds the anchored span; anchors taken on wrong clock?")
    if mode == "extended":
        stop += int(tail_ns)
    elif mode != "kernel":
        raise ValueError(f"unknown window mode {mode!r}")
    if len(trace) == 0:
        return AlignedWindow((start, stop), 0.0)
    t0, t1 = trace.span
    overlap = max(0, min(stop, t1) - max(start, t0))
    return AlignedWindow((start, stop), overlap / (stop - start))


def _load(cfg: RunConfig) -> Workload:
    if isinstance(cfg.workload, Workload):
        return cfg.workload
    path = Path(cfg.workload)
    if not path.exists() and str(cfg.workload) in WORKLOAD_IDS:
        manifest, blobs = make_workload(str(cfg.workload), cfg.scale, cfg.seed)
        return Workload(manifest, blobs, fnv1a64_hex(canonical_json(manifest.to_dict())))
    return read_workload(path)


def _slow(step, factor: float):
    def slowed():
        t0 = time.perf_counter()
        out = step()
        time.sleep(factor * (time.perf_counter() - t0))
        return out

    return slowed


def run_benchmark(cfg: RunConfig) -> ResultBundle:
    """Execute the full protocol and (when ``cfg.out`` is set) persist the bundle."""
    workload = _load(cfg)
    device = backend_mod.find_device(cfg.device_id, cfg.worker_count)
    host = backend_mod.get_backend(device)
    if workload.precision == "f64" and not device.supports_f64:
        raise backend_mod.DeviceError(f"device {device.id} lacks float64 support")
    iterations = cfg.iterations or workload.manifest.iterations
    provider = cfg.provider
    rate = cfg.sample_hz
    period_s = 1.0 / rate
    lead_s = 2.5 * period_s
    tail_ns = int(cfg.tail_seconds * 1e9) if cfg.window == "extended" else 0
    chain = correction_chain(cfg.psu_efficiency, cfg.legacy_external)

    traces: list[PowerTrace] = []
    baseline = None
    baseline_index = None
    energy_ok = provider is not None
    if provider is not None:
        try:
            baseline, btrace = measure_baseline(provider, rate, cfg.baseline_seconds)
            traces.append(btrace)
            baseline_index = 0
        except (ProviderError, InsufficientDataError) as exc:
            warnings.warn(f"baseline measurement failed, energy unavailable: {exc}",
                          MeasurementWarning)
            energy_ok = False

    exe = bind(workload, host)
    config_key = (device.id, workload.workload_id, workload.precision)
    records: list[RunRecord] = []
    for k in range(cfg.runs):
        step = exe.step
        if cfg.warmup_iterations:
            if provider is not None:
                provider.set_phase("warmup")
            for _ in range(cfg.warmup_iterations):
                step()
        if k in cfg.slowdown:
            step = _slow(step, float(cfg.slowdown[k]))

        session = None
        if energy_ok:
            provider.set_phase("measure")
            try:
                session = provider.open_session(rate).start()
                time.sleep(lead_s)
            except ProviderError as exc:
                warnings.warn(f"run {k}: sampling failed to start: {exc}", MeasurementWarning)
                session = None
        anchor_start = now_ns()
        output, timing, per_iter = run_timed(step, iterations)
        anchor_stop = now_ns()

        trace = None
        if session is not None:
            time.sleep(lead_s + tail_ns / 1e9)
            try:
                trace = session.stop()
            except ErgmarkError as exc:
                warnings.warn(f"run {k}: sampling failed: {exc}", MeasurementWarning)
        if provider is not None:
            provider.set_phase("idle")

        energy, status, trace_index = None, "unavailable", None
        if trace is not None and len(trace) >= 2:
            traces.append(trace)
            trace_index = len(traces) - 1
            aligned = align_trace_to_window(trace, timing, (anchor_start, anchor_stop),
                                            cfg.window, tail_ns)
            energy = compute_energy(trace, aligned.window, baseline, chain)
            status = "degraded" if energy.degraded or aligned.degraded else "ok"
        elif trace is not None:
            traces.append(trace)
            trace_index = len(traces) - 1

        verified = None
        if cfg.verify:
            verified, detail = verify_output(workload, output)
            if not verified:
                warnings.warn(f"run {k}: output verification failed: {detail}",
                              MeasurementWarning)
        records.append(RunRecord(
            index=k,
            timing=timing,
            energy=energy,
            trace_index=trace_index,
            output_checksum=output_checksum(output),
            conforming=cfg.conforming,
            config_key=config_key,
            anchors=(anchor_start, anchor_stop),
            iteration_ns=per_iter,
            energy_status=status,
            verified=verified,
        ))

    checksums = {r.output_checksum for r in records}
    aggregate = aggregate_runs(records)
    aggregate["outputs_consistent"] = len(checksums) == 1
    aggregate["conforming"] = cfg.conforming
    if len(checksums) != 1:
        warnings.warn("outputs differ between runs of the same input", MeasurementWarning)
        aggregate["valid"] = False
    if cfg.verify and not all(r.verified for r in records):
        aggregate["valid"] = False

    bundle = ResultBundle(
        manifest_hash=workload.manifest_hash,
        device=device,
        runs=records,
        aggregate=aggregate,
        traces=traces,
        baseline=baseline,
        baseline_trace_index=baseline_index,
        config={
            "provider": cfg.provider_name if provider is not None else "none",
            "sample_hz": rate,
            "baseline_seconds": cfg.baseline_seconds,
            "window": cfg.window,
            "tail_ns": tail_ns,
            "psu_efficiency": cfg.psu_efficiency,
            "legacy_external": cfg.legacy_external,
            "runs": cfg.runs,
            "warmup_iterations": cfg.warmup_iterations,
            "verify": cfg.verify,
        },
        workload={
            "workload_id": workload.workload_id,
            "precision": workload.precision,
            "iterations": iterations,
            "params": workload.params,
        },
    )
    if cfg.out is not None:
        write_results(bundle, cfg.out)
    return bundle


def analyze_bundle(directory: Union[str, Path]) -> dict:
    """Recompute every run's energy from the stored traces and compare."""
    bundle = read_results(directory)
    runs = []
    worst = 0.0
    recomputed_records = []
    for r in bundle.runs:
        entry = {"index": r.index, "stored": None, "recomputed": None, "rel_diff": None}
        new_energy = None
        if r.energy is not None:
            trace = bundle.traces[r.trace_index]
            new_energy = compute_energy(trace, r.energy.window, bundle.baseline,
                                        r.energy.corrections)
            old = r.energy.joules_corrected
            new = new_energy.joules_corrected
            rel = abs(new - old) / abs(old) if old else abs(new - old)
            worst = max(worst, rel)
            entry.update(stored=r.energy.to_dict(), recomputed=new_energy.to_dict(),
                         rel_diff=rel)
        runs.append(entry)
        recomputed_records.append(RunRecord(
            r.index, r.timing, new_energy, r.trace_index, r.output_checksum, r.conforming,
            r.config_key, r.anchors, r.iteration_ns, r.energy_status, r.verified))
    aggregate = aggregate_runs(recomputed_records)
    return {
        "bundle": str(directory),
        "workload": bundle.workload,
        "device": bundle.device.id,
        "runs": runs,
        "max_rel_diff": worst,
        "aggregate": aggregate,
        "valid": aggregate["valid"],
    }
