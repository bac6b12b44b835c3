import numpy as np
import pytest

from ergmark import orchestrator as O
from ergmark.backend import TimingRecord
from ergmark.container import (
    DataBlob,
    Workload,
    WorkloadManifest,
    canonical_json,
    fnv1a64_hex,
    read_results,
)
from ergmark.errors import MeasurementWarning
from ergmark.power import PowerTrace, SyntheticProvider

S = 1_000_000_000


def _dot_workload(n=1 << 20, iterations=250, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n).astype(np.float32)
    y = rng.uniform(-1, 1, n).astype(np.float32)
    refs = (DataBlob("x", "f32", (n,)), DataBlob("y", "f32", (n,)))
    m = WorkloadManifest("dot", "f32", {"vector_len": n}, iterations, refs)
    return Workload(m, {"x": x, "y": y}, fnv1a64_hex(canonical_json(m.to_dict())))


def _cfg(**kw):
    base = dict(workload=_dot_workload(), baseline_seconds=3.0, runs=3)
    base.update(kw)
    return O.RunConfig(**base)


def _check_time_verdict(bundle):
    """The time verdict must follow from the stored kernel times.

    Whether three runs agree within 15% depends on the machine, so tests that
    are not about the gate only check that the verdict is derived correctly.
    """
    t = np.array([r.timing.kernel_ns for r in bundle.runs], dtype=float)
    dev = float(np.max(np.abs(t - t.mean())) / t.mean())
    rep = bundle.aggregate["validity"]["time"]
    assert rep["max_rel_dev"] == pytest.approx(dev, rel=1e-9)
    assert rep["valid"] == (dev <= 0.15)
    energy_rep = bundle.aggregate["validity"].get("energy")
    assert bundle.valid == (rep["valid"] and (energy_rep is None or energy_rep["valid"]))


def test_runconfig_requires_three_runs():
    with pytest.raises(ValueError, match="at least 3"):
        O.RunConfig(workload="dot", runs=2)
    cfg = O.RunConfig(workload="dot", runs=2, allow_fewer_runs=True)
    assert not cfg.conforming


def test_synthetic_energies_and_validity(tmp_path):
    prov = SyntheticProvider.load_profile(20.0, 100.0)
    bundle = O.run_benchmark(_cfg(provider=prov, provider_name="synthetic", out=tmp_path / "b"))
    assert bundle.baseline.watts == 20.0
    assert len(bundle.runs) == 3
    for r in bundle.runs:
        a, b = r.anchors
        span = (b - a) / S
        assert r.timing.kernel_ns <= b - a
        assert r.energy.joules_raw == pytest.approx(100.0 * span, rel=1e-9)
        assert r.energy.joules_net == pytest.approx(80.0 * span, rel=1e-9)
        assert r.energy.coverage == 1.0 and r.energy_status == "ok"
    assert len({r.output_checksum for r in bundle.runs}) == 1
    _check_time_verdict(bundle)
    back = read_results(tmp_path / "b")
    assert back.runs == bundle.runs


def test_warmup_excluded_from_energy():
    # a huge power step that is only present during warm-up
    prov = SyntheticProvider.load_profile(20.0, 100.0, warmup_watts=5000.0)
    bundle = O.run_benchmark(_cfg(provider=prov, provider_name="synthetic",
                                  warmup_iterations=5))
    for r in bundle.runs:
        a, b = r.anchors
        assert r.energy.joules_raw == pytest.approx(100.0 * (b - a) / S, rel=1e-12)
    assert bundle.aggregate["energy_j"]["max"] < 100.0 * 5


def test_provider_none_reports_time_only():
    bundle = O.run_benchmark(_cfg(provider=None))
    assert all(r.energy is None and r.energy_status == "unavailable" for r in bundle.runs)
    assert bundle.aggregate["energy_j"] is None
    assert bundle.aggregate["time_ns"]["n"] == 3
    _check_time_verdict(bundle)


def test_provider_failure_degrades_energy_not_time():
    prov = SyntheticProvider.constant(50.0, fail_after_s=0.2)
    with pytest.warns(MeasurementWarning, match="baseline"):
        bundle = O.run_benchmark(_cfg(provider=prov, provider_name="synthetic"))
    assert all(r.energy is None for r in bundle.runs)
    assert all(r.timing.kernel_ns > 0 for r in bundle.runs)
    assert bundle.aggregate["validity"]["energy"] is None
    _check_time_verdict(bundle)


def test_injected_slowdown_fails_validity(tmp_path):
    bundle = O.run_benchmark(_cfg(slowdown={1: 0.3}, out=tmp_path / "s"))
    rep = bundle.aggregate["validity"]["time"]
    assert not rep["valid"] and rep["max_rel_dev"] > 0.15
    assert not bundle.valid
    # invalid bundles are still persisted
    assert not read_results(tmp_path / "s").valid


def test_runs_are_deterministic():
    a = O.run_benchmark(_cfg(runs=3))
    b = O.run_benchmark(_cfg(runs=3))
    assert {r.output_checksum for r in a.runs} == {r.output_checksum for r in b.runs}
    assert len({r.output_checksum for r in a.runs}) == 1


@pytest.mark.parametrize("wid", ["median2d", "xcorr", "rk2d"])
def test_verify_small_workloads(wid):
    from ergmark.workloads import make_workload

    m, blobs = make_workload(wid, "desk", seed=1, iterations=1)
    if wid == "median2d":
        blobs = {"image": blobs["image"][:64, :80]}
        params = dict(m.params, width=80, height=64)
        refs = (DataBlob("image", "u16", (64, 80)),)
    elif wid == "xcorr":
        blobs = {k: v[:512] for k, v in blobs.items()}
        params = dict(m.params, vector_len=512, lag_range=100)
        refs = (DataBlob("x", "f32", (512,)), DataBlob("y", "f32", (512,)))
    else:
        params = dict(m.params, steps=20)
        refs = m.blob_refs
    small = WorkloadManifest(wid, m.precision, params, 1, refs)
    wl = Workload(small, blobs, "x")
    bundle = O.run_benchmark(O.RunConfig(workload=wl, verify=True, warmup_iterations=0))
    assert all(r.verified for r in bundle.runs)


# ---------------------------------------------------------------- alignment


def _flat_trace(t0_s, t1_s, watts=10.0):
    t = np.arange(int(t0_s * 10), int(t1_s * 10) + 1) * 100_000_000
    return PowerTrace(t, np.full(t.size, watts), "synthetic", 10.0)


def test_align_anchors_on_samples():
    tr = _flat_trace(0, 5)
    timing = TimingRecord(S, 0, S, 1)
    w = O.align_trace_to_window(tr, timing, (S, 2 * S))
    assert w.window == (S, 2 * S) and w.coverage == 1.0 and not w.degraded


def test_align_extended_tail():
    tr = _flat_trace(0, 5)
    w = O.align_trace_to_window(tr, TimingRecord(S, 0, S, 1), (S, 2 * S), "extended", S // 2)
    assert w.window == (S, 5 * S // 2)


def test_align_between_samples_interpolates():
    from ergmark.energy import integrate_power

    t = np.arange(11) * 100_000_000
    tr = PowerTrace(t, np.arange(11) * 10.0, "synthetic", 10.0)  # 0..100 W ramp
    w = O.align_trace_to_window(tr, TimingRecord(1, 0, 1, 1), (150_000_000, 650_000_000))
    # ramp P = 100 t: integral over [0.15, 0.65] = 50 (0.65^2 - 0.15^2)
    assert integrate_power(tr, w.window).joules == pytest.approx(50 * (0.65**2 - 0.15**2))


def test_align_trace_starting_late_is_degraded():
    from ergmark.energy import compute_energy

    tr = _flat_trace(3, 6)  # trace starts 1 s after the start anchor
    w = O.align_trace_to_window(tr, TimingRecord(3 * S, 0, 3 * S, 1), (2 * S, 5 * S))
    assert w.coverage == pytest.approx(2 / 3)
    assert w.degraded
    res = compute_energy(tr, w.window, None)
    assert res.coverage == pytest.approx(2 / 3) and res.degraded


def test_align_rejects_inconsistent_anchors():
    tr = _flat_trace(0, 5)
    with pytest.raises(ValueError):
        O.align_trace_to_window(tr, TimingRecord(1, 0, 1, 1), (2 * S, S))
    with pytest.raises(ValueError):
        O.align_trace_to_window(tr, TimingRecord(5 * S, 0, 5 * S, 1), (0, S))


def test_analyze_bundle_matches_run(tmp_path):
    prov = SyntheticProvider.load_profile(20.0, 100.0)
    bundle = O.run_benchmark(_cfg(provider=prov, provider_name="synthetic",
                                  psu_efficiency=0.85, out=tmp_path / "a"))
    rep = O.analyze_bundle(tmp_path / "a")
    assert rep["max_rel_diff"] <= 1e-9
    for entry, r in zip(rep["runs"], bundle.runs):
        assert entry["recomputed"]["joules_corrected"] == pytest.approx(
            r.energy.joules_corrected, rel=1e-12)
        assert entry["recomputed"]["corrections"] == [{"kind": "psu_efficiency", "factor": 0.85}]
