"""Power trace acquisition: providers, sampling sessions and idle baselines.

All sample timestamps are ``time.monotonic_ns()`` values so they share an
epoch with the run anchors recorded by the orchestrator (and with child
processes started through the subprocess bridge).
"""

from __future__ import annotations

import csv
import io
import logging
import math
import shlex
import subprocess
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    InsufficientDataError,
    MeasurementWarning,
    ProviderError,
    TraceFormatError,
)

log = logging.getLogger(__name__)

PROVIDER_KINDS = ("energy_counter", "external_trace", "subprocess_bridge", "synthetic")
DEFAULT_RATE_HZ = 10.0
MIN_RATE_HZ = 1.0
MAX_RATE_HZ = 1000.0

now_ns = time.monotonic_ns


@dataclass(frozen=True)
class PowerSample:
    t_ns: int
    watts: float

    def __post_init__(self):
        if not math.isfinite(self.watts) or self.watts < 0:
            raise ValueError(f"invalid power sample {self.watts!r}")


@dataclass(eq=False)
class PowerTrace:
    """Time-ordered power samples with provenance.

    ``gaps`` holds ``(start_ns, end_ns)`` spans where the provider failed.
    ``flags`` may contain ``degraded``, ``reordered`` and
    ``baseline_subtracted``.
    """

    t_ns: np.ndarray
    watts: np.ndarray
    provider: str
    nominal_rate_hz: float = DEFAULT_RATE_HZ
    gaps: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    clamp_count: int = 0

    def __post_init__(self):
        self.t_ns = np.asarray(self.t_ns, dtype=np.int64)
        self.watts = np.asarray(self.watts, dtype=np.float64)
        if self.t_ns.shape != self.watts.shape or self.t_ns.ndim != 1:
            raise ValueError("timestamps and watts must be 1D arrays of equal length")
        if self.provider not in PROVIDER_KINDS:
            raise ValueError(f"unknown provider kind {self.provider!r}")
        if self.t_ns.size > 1 and not (np.diff(self.t_ns) > 0).all():
            raise ValueError("trace timestamps must be strictly increasing")
        if not np.isfinite(self.watts).all() or (self.watts < 0).any():
            raise ValueError("trace watts must be finite and nonnegative")
        self.gaps = [(int(a), int(b)) for a, b in self.gaps]
        self.flags = list(self.flags)

    def __len__(self) -> int:
        return int(self.t_ns.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PowerTrace):
            return NotImplemented
        return (np.array_equal(self.t_ns, other.t_ns)
                and np.array_equal(self.watts, other.watts)
                and self.provider == other.provider
                and self.nominal_rate_hz == other.nominal_rate_hz
                and self.gaps == other.gaps
                and self.flags == other.flags
                and self.clamp_count == other.clamp_count)

    @property
    def degraded(self) -> bool:
        return bool(self.gaps) or "degraded" in self.flags

    @property
    def span(self) -> tuple[int, int]:
        if len(self) == 0:
            raise InsufficientDataError("empty trace")
        return int(self.t_ns[0]), int(self.t_ns[-1])

    @property
    def samples(self) -> list[PowerSample]:
        return [PowerSample(int(t), float(w)) for t, w in zip(self.t_ns, self.watts)]

    def between(self, start_ns: int, stop_ns: int, pad: int = 1) -> "PowerTrace":
        """Sub-trace covering ``[start_ns, stop_ns]`` plus ``pad`` neighbours."""
        lo = max(0, int(np.searchsorted(self.t_ns, start_ns, side="left")) - pad)
        hi = min(len(self), int(np.searchsorted(self.t_ns, stop_ns, side="right")) + pad)
        gaps = [(a, b) for a, b in self.gaps if b >= start_ns and a <= stop_ns]
        return PowerTrace(self.t_ns[lo:hi].copy(), self.watts[lo:hi].copy(), self.provider,
                          self.nominal_rate_hz, gaps, list(self.flags), self.clamp_count)

    # ---- persistence -----------------------------------------------------

    def to_csv(self) -> str:
        lines = ["t_ns,watts"]
        lines.extend(f"{int(t)},{float(w)!r}" for t, w in zip(self.t_ns, self.watts))
        return "\n".join(lines) + "\n"

    def metadata(self) -> dict:
        return {
            "provider": self.provider,
            "nominal_rate_hz": self.nominal_rate_hz,
            "gaps": [list(g) for g in self.gaps],
            "flags": list(self.flags),
            "clamp_count": self.clamp_count,
            "samples": len(self),
        }

    @classmethod
    def from_csv(cls, text: str, meta: dict) -> "PowerTrace":
        rows = text.strip().splitlines()
        if not rows or rows[0].strip() != "t_ns,watts":
            raise TraceFormatError("trace CSV must start with header 't_ns,watts'")
        t, w = [], []
        for line in rows[1:]:
            a, b = line.split(",")
            t.append(int(a))
            w.append(float(b))
        return cls(np.array(t, dtype=np.int64), np.array(w), meta["provider"],
                   meta.get("nominal_rate_hz", DEFAULT_RATE_HZ), meta.get("gaps", []),
                   meta.get("flags", []), meta.get("clamp_count", 0))


@dataclass(frozen=True)
class BaselineEstimate:
    watts: float
    duration_ns: int
    sample_count: int
    dispersion: float

    def to_dict(self) -> dict:
        return {"watts": self.watts, "duration_ns": self.duration_ns,
                "sample_count": self.sample_count, "dispersion": self.dispersion}

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineEstimate":
        return cls(**d)


# --------------------------------------------------------------------------
# normalisation helpers


def _normalize(t_ns: np.ndarray, watts: np.ndarray) -> tuple[np.ndarray, np.ndarray, list]:
    """Sort by time and average duplicate timestamps."""
    flags = []
    t_ns = np.asarray(t_ns, dtype=np.int64)
    watts = np.asarray(watts, dtype=np.float64)
    if t_ns.size > 1 and (np.diff(t_ns) < 0).any():
        order = np.argsort(t_ns, kind="stable")
        t_ns, watts = t_ns[order], watts[order]
        flags.append("reordered")
    if t_ns.size > 1 and (np.diff(t_ns) == 0).any():
        uniq, inverse, counts = np.unique(t_ns, return_inverse=True, return_counts=True)
        sums = np.zeros(uniq.size)
        np.add.at(sums, inverse, watts)
        t_ns, watts = uniq, sums / counts
    return t_ns, watts, flags


def _rate_from_spacing(t_ns: np.ndarray, fallback: float = DEFAULT_RATE_HZ) -> float:
    if t_ns.size < 2:
        return fallback
    return 1e9 / float(np.median(np.diff(t_ns)))


# --------------------------------------------------------------------------
# energy counters


@dataclass(frozen=True)
class CounterReading:
    t_ns: int
    energy_uj: int


def read_counter(path: Union[str, Path]) -> int:
    with open(path) as fh:
        return int(fh.read().strip())


def read_energy_counter_power(
    path: Union[str, Path],
    prev: Optional[CounterReading],
    max_range: Optional[int] = None,
    t_ns: Optional[int] = None,
) -> tuple[Optional[PowerSample], CounterReading]:
    """Average power since ``prev`` from a microjoule energy counter file.

    Returns ``(sample, reading)``; ``sample`` is None on the first read.  The
    sample is stamped at the midpoint of the polling interval.  A counter
    that went backwards is treated as one wraparound when ``max_range`` is
    configured; otherwise :class:`ProviderError` is raised (the caller keeps
    ``reading`` via the exception's ``reading`` attribute).
    """
    t = now_ns() if t_ns is None else t_ns
    reading = CounterReading(t, read_counter(path))
    if prev is None:
        return None, reading
    dt = reading.t_ns - prev.t_ns
    if dt <= 0:
        raise ProviderError("counter polled twice at the same instant")
    delta = reading.energy_uj - prev.energy_uj
    if delta < 0:
        if max_range is None:
            exc = ProviderError(
                f"energy counter went backwards ({prev.energy_uj} -> {reading.energy_uj})"
            )
            exc.reading = reading
            raise exc
        delta += max_range
    watts = (delta * 1e-6) / (dt * 1e-9)
    return PowerSample(prev.t_ns + dt // 2, watts), reading


# --------------------------------------------------------------------------
# providers


class PowerProvider:
    """Base class.  ``set_phase`` lets load-aware providers track the run state."""

    kind = "synthetic"

    def set_phase(self, phase: str) -> None:
        pass

    def open_session(self, rate_hz: float) -> "SamplingSession":
        return PollingSession(self, rate_hz)

    def reset(self) -> None:
        """Forget per-session state (called when a polling session starts)."""

    def read(self, t_ns: int):
        """Return watts, ``(stamp_ns, watts)``, or None for "no sample yet".

        Raising marks a gap in the session.
        """
        raise NotImplementedError


class SyntheticProvider(PowerProvider):
    """Scripted power source ``fn(phase, t_ns) -> watts``.

    The phase is one of ``idle``, ``baseline``, ``warmup``, ``measure`` and is
    set by the orchestrator.  ``fail_after_s`` makes reads raise once that
    much time has passed since the session started.
    """

    kind = "synthetic"

    def __init__(self, fn: Callable[[str, int], float], fail_after_s: Optional[float] = None):
        self.fn = fn
        self.phase = "idle"
        self.fail_after_s = fail_after_s
        self._t0: Optional[int] = None

    def set_phase(self, phase: str) -> None:
        self.phase = phase

    def reset(self) -> None:
        self._t0 = None

    def read(self, t_ns: int) -> Optional[float]:
        if self._t0 is None:
            self._t0 = t_ns
        if self.fail_after_s is not None and t_ns - self._t0 >= self.fail_after_s * 1e9:
            raise ProviderError("synthetic provider failure")
        return float(self.fn(self.phase, t_ns))

    @classmethod
    def constant(cls, watts: float, **kw) -> "SyntheticProvider":
        return cls(lambda phase, t: watts, **kw)

    @classmethod
    def load_profile(cls, idle_watts: float, load_watts: float,
                     warmup_watts: Optional[float] = None) -> "SyntheticProvider":
        """``load_watts`` while measuring, ``warmup_watts`` (default load) during
        warm-up, ``idle_watts`` otherwise."""
        warm = load_watts if warmup_watts is None else warmup_watts

        def fn(phase: str, t: int) -> float:
            if phase == "measure":
                return load_watts
            if phase == "warmup":
                return warm
            return idle_watts

        return cls(fn)

    @classmethod
    def gaussian(cls, mean: float, sigma: float, seed: int = 0) -> "SyntheticProvider":
        rng = np.random.default_rng(seed)
        return cls(lambda phase, t: max(0.0, mean + sigma * float(rng.standard_normal())))

    @classmethod
    def square_wave(cls, mean: float, amplitude: float) -> "SyntheticProvider":
        """Alternates ``mean + amplitude`` and ``mean - amplitude`` per read."""
        state = {"k": 0}

        def fn(phase: str, t: int) -> float:
            state["k"] += 1
            return mean + amplitude if state["k"] % 2 else mean - amplitude

        return cls(fn)


class CounterProvider(PowerProvider):
    """Polls a powercap-style ``energy_uj`` file."""

    kind = "energy_counter"

    def __init__(self, path: Union[str, Path], max_range: Optional[int] = None):
        self.path = Path(path)
        self.max_range = max_range
        self._prev: Optional[CounterReading] = None
        if not self.path.exists():
            raise ProviderError(f"energy counter {self.path} not found")
        if max_range is None:
            rng_file = self.path.with_name("max_energy_range_uj")
            if rng_file.exists():
                try:
                    self.max_range = read_counter(rng_file)
                except (OSError, ValueError):
                    pass

    def reset(self) -> None:
        self._prev = None

    def read(self, t_ns: int) -> Optional[float]:
        try:
            sample, self._prev = read_energy_counter_power(self.path, self._prev,
                                                           self.max_range, t_ns)
        except ProviderError as exc:
            self._prev = getattr(exc, "reading", self._prev)
            raise
        except (OSError, ValueError) as exc:
            self._prev = None
            raise ProviderError(f"cannot read energy counter: {exc}") from exc
        # stamped at the polling-interval midpoint
        return None if sample is None else (sample.t_ns, sample.watts)


class BridgeProvider(PowerProvider):
    """Runs a user command that prints ``t_ns,watts`` lines on stdout."""

    kind = "subprocess_bridge"

    def __init__(self, command: Union[str, list]):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ProviderError("empty bridge command")

    def open_session(self, rate_hz: float) -> "SamplingSession":
        return BridgeSession(self, rate_hz)


class TraceFileProvider(PowerProvider):
    """Replays an external multimeter log that shares the host monotonic epoch.

    The file is re-imported when a session stops, so it may be appended to
    while the benchmark runs.
    """

    kind = "external_trace"

    def __init__(self, path: Union[str, Path], voltage_v: Optional[float] = None,
                 offset_s: float = 0.0):
        self.path = Path(path)
        self.voltage_v = voltage_v
        self.offset_s = offset_s

    def open_session(self, rate_hz: float) -> "SamplingSession":
        return TraceFileSession(self, rate_hz)


# --------------------------------------------------------------------------
# sessions


class SamplingSession:
    def __init__(self, provider: PowerProvider, rate_hz: float):
        if not MIN_RATE_HZ <= rate_hz <= MAX_RATE_HZ:
            raise ProviderError(f"sample rate {rate_hz} Hz outside [1, 1000]")
        self.provider = provider
        self.rate_hz = float(rate_hz)
        self.started_ns: Optional[int] = None
        self.stopped_ns: Optional[int] = None

    def start(self) -> "SamplingSession":
        raise NotImplementedError

    def stop(self) -> PowerTrace:
        raise NotImplementedError

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        if self.stopped_ns is None:
            self.stop()


class PollingSession(SamplingSession):
    """Polls ``provider.read`` on a dedicated thread at a fixed cadence."""

    def __init__(self, provider: PowerProvider, rate_hz: float):
        super().__init__(provider, rate_hz)
        self._t: list[int] = []
        self._w: list[float] = []
        self._gaps: list[tuple[int, int]] = []
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._trace: Optional[PowerTrace] = None

    def start(self) -> "PollingSession":
        self.provider.reset()
        self.started_ns = now_ns()
        self._thread = threading.Thread(target=self._loop, name="ergmark-sampler", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        period = int(1e9 / self.rate_hz)
        next_tick = now_ns()
        gap_start: Optional[int] = None
        while not self._stop.is_set():
            t = now_ns()
            try:
                w = self.provider.read(t)
            except Exception as exc:
                if gap_start is None:
                    gap_start = self._t[-1] if self._t else t
                    log.debug("power provider failed: %s", exc)
            else:
                if w is not None:
                    stamp, watts = w if isinstance(w, tuple) else (t, w)
                    if self._t and stamp <= self._t[-1]:
                        stamp = self._t[-1] + 1
                    if gap_start is not None:
                        self._gaps.append((gap_start, stamp))
                        gap_start = None
                    self._t.append(stamp)
                    self._w.append(watts)
            next_tick += period
            delay = next_tick - now_ns()
            if delay < 0:
                next_tick = now_ns()
                delay = 0
            self._stop.wait(delay / 1e9)
        if gap_start is not None:
            self._gaps.append((gap_start, now_ns()))

    def stop(self) -> PowerTrace:
        if self._trace is not None:
            return self._trace
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.stopped_ns = now_ns()
        flags = ["degraded"] if self._gaps else []
        self._trace = PowerTrace(np.array(self._t, dtype=np.int64), np.array(self._w),
                                 self.provider.kind, self.rate_hz, self._gaps, flags)
        return self._trace


class BridgeSession(SamplingSession):
    def __init__(self, provider: BridgeProvider, rate_hz: float):
        super().__init__(provider, rate_hz)
        self._proc: Optional[subprocess.Popen] = None
        self._reader: Optional[threading.Thread] = None
        self._lines: list[str] = []
        self._trace: Optional[PowerTrace] = None

    def start(self) -> "BridgeSession":
        self.started_ns = now_ns()
        try:
            self._proc = subprocess.Popen(self.provider.command, stdout=subprocess.PIPE,
                                          stderr=subprocess.DEVNULL, text=True)
        except OSError as exc:
            raise ProviderError(f"cannot start bridge command: {exc}") from exc
        self._reader = threading.Thread(target=self._read, name="ergmark-bridge", daemon=True)
        self._reader.start()
        return self

    def _read(self) -> None:
        assert self._proc is not None and self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.append(line)

    def stop(self) -> PowerTrace:
        if self._trace is not None:
            return self._trace
        assert self._proc is not None
        exited = self._proc.poll() is not None
        if not exited:
            self._proc.terminate()
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        if self._reader is not None:
            self._reader.join(timeout=5)
        self.stopped_ns = now_ns()
        t, w, bad = [], [], 0
        for line in self._lines:
            line = line.strip()
            if not line or line.startswith("t_ns"):
                continue
            try:
                a, b = line.split(",")
                ti, wi = int(a), float(b)
            except ValueError:
                bad += 1
                continue
            if not math.isfinite(wi) or wi < 0:
                bad += 1
                continue
            t.append(ti)
            w.append(wi)
        tt, ww, flags = _normalize(np.array(t, dtype=np.int64), np.array(w))
        gaps = []
        if bad:
            flags.append("degraded")
        if exited and tt.size and tt[-1] < self.stopped_ns - 5 * 1e9 / self.rate_hz:
            # bridge died early: the tail of the session is uncovered
            gaps.append((int(tt[-1]), self.stopped_ns))
            flags.append("degraded")
        self._trace = PowerTrace(tt, ww, "subprocess_bridge", self.rate_hz, gaps, flags)
        return self._trace


class TraceFileSession(SamplingSession):
    def start(self) -> "TraceFileSession":
        self.started_ns = now_ns()
        return self

    def stop(self) -> PowerTrace:
        self.stopped_ns = now_ns()
        p = self.provider
        full = import_external_trace(p.path, voltage_v=p.voltage_v, offset_s=p.offset_s)
        return full.between(self.started_ns, self.stopped_ns)


def make_provider(kind: str, **opts) -> Optional[PowerProvider]:
    """Build a provider from CLI-style options; ``none`` returns None."""
    if kind in (None, "none"):
        return None
    if kind == "synthetic":
        return SyntheticProvider.load_profile(opts.get("idle_watts", 20.0),
                                              opts.get("load_watts", 100.0))
    if kind == "counter":
        if not opts.get("counter_path"):
            raise ProviderError("--counter-path is required for the counter provider")
        return CounterProvider(opts["counter_path"], opts.get("counter_max_range"))
    if kind == "trace":
        if not opts.get("trace_file"):
            raise ProviderError("--trace-file is required for the trace provider")
        return TraceFileProvider(opts["trace_file"], opts.get("trace_voltage"),
                                 opts.get("trace_offset_s", 0.0))
    if kind == "bridge":
        if not opts.get("bridge_cmd"):
            raise ProviderError("--bridge-cmd is required for the bridge provider")
        return BridgeProvider(opts["bridge_cmd"])
    raise ProviderError(f"unknown power provider {kind!r}")


def sample_session(provider: PowerProvider, rate_hz: float = DEFAULT_RATE_HZ) -> SamplingSession:
    """Start sampling ``provider``; call ``stop()`` on the result for the trace."""
    return provider.open_session(rate_hz).start()


# --------------------------------------------------------------------------
# external traces


def import_external_trace(
    path: Union[str, Path],
    voltage_v: Optional[float] = None,
    offset_s: float = 0.0,
) -> PowerTrace:
    """Read a ``t_s,amps`` or ``t_s,watts`` CSV log into a power trace.

    Current logs need ``voltage_v`` (P = V * I).  Rows are sorted by time
    (flagged ``reordered`` if needed) and duplicate timestamps averaged.
    ``offset_s`` shifts the log onto the host monotonic clock.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise TraceFormatError(f"cannot read trace file {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = [(i + 1, r) for i, r in enumerate(reader) if r and any(c.strip() for c in r)]
    if not rows:
        raise TraceFormatError(f"trace file {path} is empty")
    header = [c.strip().lower() for c in rows[0][1]]
    if header == ["t_s", "amps"]:
        if voltage_v is None:
            raise TraceFormatError("current log (t_s,amps) requires a supply voltage")
        scale = float(voltage_v)
    elif header == ["t_s", "watts"]:
        scale = None
    else:
        raise TraceFormatError(f"unrecognised trace header {rows[0][1]!r}; "
                               "expected 't_s,amps' or 't_s,watts'")
    t, w, bad = [], [], []
    for lineno, row in rows[1:]:
        try:
            if len(row) != 2:
                raise ValueError
            ts, val = float(row[0]), float(row[1])
            if not (math.isfinite(ts) and math.isfinite(val)) or val < 0:
                raise ValueError
        except ValueError:
            bad.append(lineno)
            continue
        t.append(int(round((ts + offset_s) * 1e9)))
        w.append(val * scale if scale is not None else val)
    if bad:
        raise TraceFormatError(f"non-numeric or invalid rows at lines {bad}", bad)
    if not t:
        raise TraceFormatError(f"trace file {path} has no data rows")
    tt, ww, flags = _normalize(np.array(t, dtype=np.int64), np.array(w))
    return PowerTrace(tt, ww, "external_trace", _rate_from_spacing(tt), [], flags)


# --------------------------------------------------------------------------
# baseline


def baseline_from_trace(trace: PowerTrace, min_samples: int = 10) -> BaselineEstimate:
    if len(trace) < min_samples:
        raise InsufficientDataError(
            f"insufficient baseline data: {len(trace)} samples, need {min_samples}"
        )
    mean = float(np.mean(trace.watts))
    disp = float(np.std(trace.watts))
    t0, t1 = trace.span
    if mean > 0 and disp > 0.1 * mean:
        warnings.warn(
            f"idle power dispersion {disp:.3g} W is {100 * disp / mean:.0f}% of the "
            f"{mean:.3g} W mean; system may not be idle",
            MeasurementWarning,
            stacklevel=2,
        )
    return BaselineEstimate(mean, t1 - t0, len(trace), disp)


def measure_baseline(
    provider: PowerProvider,
    rate_hz: float = DEFAULT_RATE_HZ,
    duration_s: float = 5.0,
    min_duration_s: float = 3.0,
) -> tuple[BaselineEstimate, PowerTrace]:
    """Sample an idle system for ``duration_s`` and average the power."""
    if duration_s < min_duration_s:
        raise InsufficientDataError(
            f"baseline duration {duration_s} s below minimum {min_duration_s} s"
        )
    provider.set_phase("baseline")
    session = sample_session(provider, rate_hz)
    try:
        time.sleep(duration_s)
    finally:
        trace = session.stop()
        provider.set_phase("idle")
    return baseline_from_trace(trace), trace
