"""Energy-to-solution from power traces, validity gating and trend fitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InsufficientDataError, IntegrationError, MeasurementWarning
from .power import BaselineEstimate, PowerTrace

VALIDITY_BAND = 0.15
MIN_RUNS = 3
MAX_GAP_PERIODS = 5
MIN_COVERAGE = 0.95
LEGACY_EXTERNAL_FACTOR = 0.90
PSU_EFFICIENCY_RANGE = (0.5, 1.0)


@dataclass(frozen=True)
class Integration:
    joules: float
    window: tuple[int, int]
    covered_ns: int
    uncovered_ns: int

    @property
    def coverage(self) -> float:
        total = self.covered_ns + self.uncovered_ns
        return self.covered_ns / total if total else 0.0


def integrate_power(
    trace: PowerTrace,
    window: tuple[int, int],
    clip: bool = False,
    max_gap_periods: float = MAX_GAP_PERIODS,
) -> Integration:
    """Trapezoidal integral of ``trace`` over ``window`` (ns), in joules.

    Power at the window edges is linearly interpolated.  Sample intervals
    longer than ``max_gap_periods`` nominal periods are left out and counted
    as uncovered time.  With ``clip=True`` a window reaching outside the
    trace is cut to the trace span and the missing part is also reported as
    uncovered instead of raising.
    """
    a, b = int(window[0]), int(window[1])
    if b <= a:
        raise IntegrationError(f"empty or inverted window [{a}, {b}]")
    t = trace.t_ns
    if t.size < 2:
        raise IntegrationError("trace needs at least two samples to integrate")
    t0, t1 = int(t[0]), int(t[-1])
    if a < t0 or b > t1:
        if not clip:
            raise IntegrationError(
                f"window [{a}, {b}] outside trace span [{t0}, {t1}]"
            )
    lo, hi = max(a, t0), min(b, t1)
    if hi <= lo:
        return Integration(0.0, (a, b), 0, b - a)

    inner = (t > lo) & (t < hi)
    pts = np.concatenate(([lo], t[inner], [hi]))
    rel = (pts - lo).astype(np.float64)
    w = np.interp(rel, (t - lo).astype(np.float64), trace.watts)
    seg_ns = np.diff(pts)
    # length of the sample interval each segment lies in
    idx = np.searchsorted(t, pts[:-1], side="right") - 1
    idx = np.clip(idx, 0, t.size - 2)
    interval = t[idx + 1] - t[idx]
    max_gap = max_gap_periods * 1e9 / trace.nominal_rate_hz
    ok = interval <= max_gap
    seg_j = 0.5 * (w[:-1] + w[1:]) * (seg_ns * 1e-9)
    joules = float(np.sum(seg_j[ok]))
    covered = int(np.sum(seg_ns[ok]))
    uncovered = (b - a) - covered
    if covered == 0 and not clip:
        raise IntegrationError("window lies entirely within trace gaps")
    return Integration(joules, (a, b), covered, uncovered)


def subtract_baseline(trace: PowerTrace, baseline: BaselineEstimate) -> PowerTrace:
    """Remove idle power from every sample, clamping negative results to zero."""
    if not math.isfinite(baseline.watts) or baseline.watts < 0:
        raise ValueError(f"invalid baseline {baseline.watts!r}")
    net = trace.watts - baseline.watts
    below = net < 0
    clamps = int(np.count_nonzero(below))
    if clamps:
        warnings.warn(
            f"{clamps} of {len(trace)} samples fell below the {baseline.watts:.3g} W "
            "baseline and were clamped to 0",
            MeasurementWarning,
            stacklevel=2,
        )
        net = np.where(below, 0.0, net)
    flags = list(trace.flags)
    if "baseline_subtracted" not in flags:
        flags.append("baseline_subtracted")
    return PowerTrace(trace.t_ns.copy(), net, trace.provider, trace.nominal_rate_hz,
                      list(trace.gaps), flags, trace.clamp_count + clamps)


# --------------------------------------------------------------------------
# corrections


@dataclass(frozen=True)
class Correction:
    kind: str  # "psu_efficiency" | "legacy_external"
    factor: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "factor": self.factor}


def correction_chain(psu_efficiency: Optional[float] = None,
                     legacy_external: bool = False) -> list[Correction]:
    """Corrections for an externally measured (wall-side) trace, in order."""
    chain = []
    if psu_efficiency is not None:
        chain.append(Correction("psu_efficiency", float(psu_efficiency)))
    if legacy_external:
        chain.append(Correction("legacy_external", LEGACY_EXTERNAL_FACTOR))
    return chain


def apply_corrections(joules: float, chain: Sequence[Correction]) -> tuple[float, list[Correction]]:
    """Multiply ``joules`` by each correction factor in order.

    PSU efficiency converts wall energy to device energy; the legacy factor
    removes the fixed 10 % excess of external over internal measurement.
    """
    value = float(joules)
    ledger = []
    for c in chain:
        if c.kind == "psu_efficiency":
            lo, hi = PSU_EFFICIENCY_RANGE
            if not lo <= c.factor <= hi:
                raise ValueError(f"PSU efficiency {c.factor} outside [{lo}, {hi}]")
        elif c.kind == "legacy_external":
            if c.factor != LEGACY_EXTERNAL_FACTOR:
                raise ValueError(f"legacy correction factor is fixed at {LEGACY_EXTERNAL_FACTOR}")
        else:
            raise ValueError(f"unknown correction {c.kind!r}")
        value = value * c.factor
        ledger.append(c)
    return value, ledger


@dataclass(frozen=True)
class EnergyResult:
    joules_raw: float
    joules_net: float
    joules_corrected: float
    corrections: list
    window: tuple[int, int]
    coverage: float = 1.0
    uncovered_ns: int = 0
    clamp_count: int = 0

    @property
    def degraded(self) -> bool:
        return self.coverage < MIN_COVERAGE

    def to_dict(self) -> dict:
        return {
            "joules_raw": self.joules_raw,
            "joules_net": self.joules_net,
            "joules_corrected": self.joules_corrected,
            "corrections": [c.to_dict() for c in self.corrections],
            "window": list(self.window),
            "coverage": self.coverage,
            "uncovered_ns": self.uncovered_ns,
            "clamp_count": self.clamp_count,
            "degraded": self.degraded,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyResult":
        return cls(d["joules_raw"], d["joules_net"], d["joules_corrected"],
                   [Correction(**c) for c in d["corrections"]], tuple(d["window"]),
                   d["coverage"], d["uncovered_ns"], d["clamp_count"])


def compute_energy(
    trace: PowerTrace,
    window: tuple[int, int],
    baseline: Optional[BaselineEstimate],
    chain: Sequence[Correction] = (),
) -> EnergyResult:
    """Integrate, subtract the idle baseline and apply corrections."""
    raw = integrate_power(trace, window, clip=True)
    if baseline is not None:
        net_trace = subtract_baseline(trace, baseline)
        net = integrate_power(net_trace, window, clip=True)
        clamps = net_trace.clamp_count - trace.clamp_count
    else:
        net, clamps = raw, 0
    corrected, ledger = apply_corrections(net.joules, chain)
    return EnergyResult(raw.joules, net.joules, corrected, ledger, (int(window[0]), int(window[1])),
                        raw.coverage, raw.uncovered_ns, clamps)


# --------------------------------------------------------------------------
# validity and aggregation


@dataclass(frozen=True)
class ValidityReport:
    metric: str
    values: list
    mean: float
    max_rel_dev: float
    valid: bool
    diagnostic: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        if not math.isfinite(d["max_rel_dev"]):
            d["max_rel_dev"] = None  # undefined (zero mean or too few runs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ValidityReport":
        d = dict(d)
        if d["max_rel_dev"] is None:
            d["max_rel_dev"] = math.inf
        return cls(**d)


def check_validity(values: Sequence[float], metric: str = "time") -> ValidityReport:
    """Every run must lie within 15 % of the mean of all runs."""
    vals = [float(v) for v in values]
    if len(vals) < MIN_RUNS:
        raise InsufficientDataError(f"validity check needs at least {MIN_RUNS} runs, got {len(vals)}")
    if any(not math.isfinite(v) or v < 0 for v in vals):
        raise ValueError("metric values must be finite and nonnegative")
    mean = math.fsum(vals) / len(vals)
    if mean == 0.0:
        return ValidityReport(metric, vals, 0.0, math.inf, False, "all values are zero")
    dev = max(abs(v - mean) for v in vals) / mean
    ok = dev <= VALIDITY_BAND
    diag = "" if ok else f"max deviation {dev:.1%} exceeds {VALIDITY_BAND:.0%}"
    return ValidityReport(metric, vals, mean, dev, ok, diag)


def _stats(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(np.mean(arr)),
        "stddev": float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0,
        "min": float(np.min(arr)),
        "max": float(np.max(arr)),
        "n": int(arr.size),
    }


def _gate(values: list, metric: str, why_short: str) -> ValidityReport:
    if len(values) < MIN_RUNS:
        return ValidityReport(metric, values, float(np.mean(values)) if values else 0.0,
                              math.inf, False, why_short)
    return check_validity(values, metric)


def aggregate_runs(runs: Sequence) -> dict:
    """Mean/stddev/min/max of time and energy plus both validity reports.

    ``runs`` are run records with ``config_key``, ``timing`` and ``energy``
    attributes.  Degraded energies are left out of the energy statistics.
    """
    runs = list(runs)
    if not runs:
        raise InsufficientDataError("no runs to aggregate")
    keys = {tuple(r.config_key) for r in runs}
    if len(keys) > 1:
        raise ValueError(f"runs from mixed configurations: {sorted(keys)}")
    times = [r.timing.time_to_solution_ns for r in runs]
    kernels = [r.timing.kernel_ns for r in runs]
    out = {
        "n_runs": len(runs),
        "time_ns": _stats(times),
        "kernel_ns": _stats(kernels),
        "validity": {"time": _gate(times, "time", f"fewer than {MIN_RUNS} runs").to_dict()},
    }
    energies = [r.energy.joules_corrected for r in runs
                if r.energy is not None and not r.energy.degraded]
    have_energy = any(r.energy is not None for r in runs)
    if have_energy:
        out["energy_j"] = _stats(energies) if energies else None
        out["energy_runs_used"] = len(energies)
        out["validity"]["energy"] = _gate(
            energies, "energy", f"fewer than {MIN_RUNS} non-degraded energy results"
        ).to_dict()
    else:
        out["energy_j"] = None
        out["energy_runs_used"] = 0
        out["validity"]["energy"] = None
    out["valid"] = all(v["valid"] for v in out["validity"].values() if v is not None)
    return out


# --------------------------------------------------------------------------
# trend fitting


@dataclass(frozen=True)
class TrendFit:
    """``efficiency(t) = a * exp(r * (t - reference_year))``."""

    a: float
    r: float
    two_year_factor: float
    r_squared: float
    n_points: int
    reference_year: float

    def predict(self, year):
        return self.a * np.exp(self.r * (np.asarray(year, dtype=np.float64) - self.reference_year))

    def to_dict(self) -> dict:
        return asdict(self)


def fit_trend(points: Iterable[tuple[float, float]],
              reference_year: Optional[float] = None) -> TrendFit:
    """Least-squares fit of ln(efficiency) against centred year.

    ``reference_year`` (default: mean year) is where ``a`` is reported.
    """
    pts = [(float(t), float(e)) for t, e in points]
    if len(pts) < 3:
        raise InsufficientDataError(f"trend fit needs at least 3 points, got {len(pts)}")
    years = np.array([p[0] for p in pts])
    eff = np.array([p[1] for p in pts])
    if not (np.isfinite(eff).all() and (eff > 0).all()):
        raise ValueError("efficiencies must be finite and positive")
    if not np.isfinite(years).all():
        raise ValueError("years must be finite")
    ybar = float(np.mean(years))
    tc = years - ybar
    sxx = float(np.dot(tc, tc))
    if sxx == 0.0:
        raise ValueError("degenerate trend input: all years identical")
    logs = np.log(eff)
    lbar = float(np.mean(logs))
    r = float(np.dot(tc, logs - lbar)) / sxx
    resid = logs - (lbar + r * tc)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.dot(logs - lbar, logs - lbar))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    ref = ybar if reference_year is None else float(reference_year)
    a = math.exp(lbar + r * (ref - ybar))
    return TrendFit(a=a, r=r, two_year_factor=math.exp(2.0 * r), r_squared=r2,
                    n_points=len(pts), reference_year=ref)


def efficiency(joules: float) -> float:
    """Energy efficiency used for trend fitting: solutions per joule."""
    if not joules > 0:
        raise ValueError("energy-to-solution must be positive")
    return 1.0 / joules


def synthetic_trend_points(two_year_factor: float, years, a: float = 1.0,
                           reference_year: float = 2015.0, sigma_log: float = 0.0,
                           rng: Optional[np.random.Generator] = None) -> list[tuple[float, float]]:
    """Efficiency samples on ``a * exp(r (t - reference_year))`` with r = ln(factor)/2.

    ``sigma_log`` adds i.i.d. Gaussian noise to ln(efficiency).
    """
    r = math.log(two_year_factor) / 2.0
    years = np.asarray(list(years), dtype=np.float64)
    logs = math.log(a) + r * (years - reference_year)
    if sigma_log:
        rng = rng if rng is not None else np.random.default_rng()
        logs = logs + sigma_log * rng.standard_normal(years.size)
    return [(float(t), float(v)) for t, v in zip(years, np.exp(logs))]
