import copy
import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from ergmark import container as C
from ergmark.backend import DeviceDescriptor, TimingRecord
from ergmark.energy import Correction, EnergyResult, aggregate_runs
from ergmark.errors import BundleError, WorkloadError
from ergmark.power import BaselineEstimate, PowerTrace
from ergmark.workloads import make_workload


def _dot_doc(n=3):
    return {
        "format": C.WORKLOAD_FORMAT,
        "workload_id": "dot",
        "precision": "f32",
        "params": {"vector_len": n},
        "blobs": [{"name": "x", "dtype": "f32", "shape": [n]},
                  {"name": "y", "dtype": "f32", "shape": [n]}],
    }


def _rk_doc():
    return {
        "format": C.WORKLOAD_FORMAT,
        "workload_id": "rk2d",
        "precision": "f64",
        "params": {"grid_nx": 8, "grid_ny": 8, "dt": 0.01, "steps": 5,
                   "velocity_x": 1.0, "velocity_y": 0.0},
        "iterations": 2,
        "blobs": [{"name": "u0", "dtype": "f64", "shape": [8, 8]}],
    }


def test_fnv1a64_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert C.fnv1a64(b"") == 0xCBF29CE484222325
    assert C.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert C.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_minimal_dot_manifest():
    m = C.validate_manifest(_dot_doc())
    assert m.iterations == 1
    assert [b.name for b in m.blob_refs] == ["x", "y"]
    assert all(b.shape == (3,) and b.dtype == "f32" for b in m.blob_refs)


def test_median_f32_rejected():
    doc = _dot_doc()
    doc.update(workload_id="median2d", precision="f32",
               params={"window_n": 3, "width": 4, "height": 4},
               blobs=[{"name": "image", "dtype": "f32", "shape": [4, 4]}])
    with pytest.raises(WorkloadError, match="precision unsupported for workload") as info:
        C.validate_manifest(doc)
    assert info.value.code == "unsupported_precision"


def test_rk2d_missing_dt_lists_key():
    doc = _rk_doc()
    del doc["params"]["dt"]
    with pytest.raises(WorkloadError, match="dt") as info:
        C.validate_manifest(doc)
    assert info.value.code == "missing_params"


def test_distinct_error_codes(tmp_path):
    codes = {}

    def code_of(doc):
        with pytest.raises(WorkloadError) as info:
            C.validate_manifest(doc)
        return info.value.code

    d = _dot_doc()
    d["workload_id"] = "fft"
    codes["unknown"] = code_of(d)
    d = _dot_doc()
    d["params"]["lag_range"] = 1
    codes["extra"] = code_of(d)
    d = _dot_doc()
    d["blobs"][1]["shape"] = [4]
    codes["shape"] = code_of(d)
    d = _dot_doc()
    del d["params"]["vector_len"]
    codes["missing"] = code_of(d)
    with pytest.raises(WorkloadError) as info:
        C.read_workload(tmp_path / "nothing")
    codes["file"] = info.value.code
    assert len(set(codes.values())) == len(codes)


def _write_dot(tmp_path, n=3):
    m = C.validate_manifest(_dot_doc(n))
    x = np.arange(n, dtype=np.float32)
    y = np.ones(n, dtype=np.float32)
    path = C.write_workload(m, {"x": x, "y": y}, tmp_path / "wl")
    return path, x, y


def test_workload_round_trip(tmp_path):
    path, x, y = _write_dot(tmp_path)
    wl = C.read_workload(path.parent)
    assert np.array_equal(wl.blobs["x"], x) and wl.blobs["x"].dtype == np.float32
    assert wl.manifest.to_dict() == C.validate_manifest(_dot_doc()).to_dict()
    raw = (path.parent / "x.bin").read_bytes()
    assert raw == x.astype("<f4").tobytes()


def test_checksum_mismatch(tmp_path):
    path, _, _ = _write_dot(tmp_path)
    doc = json.loads(path.read_text())
    doc["iterations"] = 7
    path.write_text(json.dumps(doc))
    with pytest.raises(WorkloadError) as info:
        C.read_workload(path.parent)
    assert info.value.code == "checksum_mismatch"


def test_blob_corruption_detected(tmp_path):
    path, _, _ = _write_dot(tmp_path)
    bpath = path.parent / "y.bin"
    data = bytearray(bpath.read_bytes())
    data[0] ^= 0xFF
    bpath.write_bytes(bytes(data))
    with pytest.raises(WorkloadError) as info:
        C.read_workload(path.parent)
    assert info.value.code == "blob_checksum_mismatch"
    bpath.write_bytes(bytes(data[:-4]))
    with pytest.raises(WorkloadError) as info:
        C.read_workload(path.parent)
    assert info.value.code == "blob_mismatch"
    bpath.unlink()
    with pytest.raises(WorkloadError) as info:
        C.read_workload(path.parent)
    assert info.value.code == "missing_blob"


def test_write_workload_deterministic(tmp_path):
    m, blobs = make_workload("xcorr", "desk", seed=5)
    a = C.write_workload(m, blobs, tmp_path / "a").parent
    m, blobs = make_workload("xcorr", "desk", seed=5)
    b = C.write_workload(m, blobs, tmp_path / "b").parent
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


# ---------------------------------------------------------------- fuzz

_scalars = st.one_of(st.none(), st.booleans(), st.integers(-5, 10**6), st.floats(allow_nan=False),
                     st.text(max_size=8))
_json = st.recursive(_scalars, lambda inner: st.one_of(
    st.lists(inner, max_size=4), st.dictionaries(st.text(max_size=10), inner, max_size=4)),
    max_leaves=12)


def _mutations():
    base = [_dot_doc(), _rk_doc()]
    keys = ["format", "workload_id", "precision", "params", "iterations", "blobs"]
    return st.tuples(st.sampled_from(base), st.sampled_from(keys), _json, st.booleans())


@settings(max_examples=400, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(_mutations())
def test_validation_is_total(mut):
    base, key, value, delete = mut
    doc = copy.deepcopy(base)
    if delete:
        doc.pop(key, None)
    else:
        doc[key] = value
    try:
        m = C.validate_manifest(doc)
    except WorkloadError as exc:
        assert exc.code and str(exc)
        return
    # anything accepted must be a complete, self-consistent manifest
    assert isinstance(m, C.WorkloadManifest)
    assert C.validate_manifest(m.to_dict()) == m


@settings(max_examples=200, deadline=None)
@given(st.dictionaries(st.sampled_from(["vector_len", "lag_range", "dt", "x"]), _scalars))
def test_param_fuzz_is_structured(params):
    doc = _dot_doc()
    doc["params"] = params
    try:
        C.validate_manifest(doc)
    except WorkloadError as exc:
        assert exc.code


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=200))
def test_garbage_manifest_file(tmp_path_factory, data):
    d = tmp_path_factory.mktemp("g")
    (d / C.MANIFEST_NAME).write_bytes(data)
    with pytest.raises(WorkloadError):
        C.read_workload(d)


# ---------------------------------------------------------------- bundles

S = 1_000_000_000


def _bundle(n_runs=3, misalign=False):
    device = DeviceDescriptor("host:cpu", "cpu_host", "test", 2, True)
    traces = [PowerTrace(np.arange(40) * 100_000_000, np.full(40, 20.0), "synthetic", 10.0)]
    runs = []
    for k in range(n_runs):
        t0 = (k + 1) * 10 * S
        t = t0 + np.arange(30) * 100_000_000
        w = 100.0 + np.arange(30) / 7.0
        traces.append(PowerTrace(t, w, "synthetic", 10.0))
        win = (t0 + S // 3, t0 + 2 * S + 17) if not (misalign and k == 1) else (0, S)
        energy = EnergyResult(1.0 / 3 + k, 0.25 + k, 0.2 + k, [Correction("psu_efficiency", 0.8)],
                              win, 1.0, 0, 0)
        runs.append(C.RunRecord(k, TimingRecord(2 * S + k, 0, 2 * S + 5000, 4), energy,
                                len(traces) - 1, "ab" * 32, True, ("host:cpu", "dot", "f32"),
                                (t0 + S // 3, t0 + 2 * S + 17), [1, 2, 3, 4], "ok", True))
    agg = aggregate_runs(runs) if runs else {}
    return C.ResultBundle("0123456789abcdef", device, runs, agg, traces,
                          BaselineEstimate(20.0, 4 * S, 40, 0.0), 0,
                          {"provider": "synthetic"},
                          {"workload_id": "dot", "precision": "f32", "iterations": 4,
                           "params": {"vector_len": 30}})


def test_bundle_round_trip(tmp_path):
    b = _bundle(3)
    files = C.write_results(b, tmp_path / "b")
    names = sorted(p.name for p in files)
    assert files[0].name == "summary.json"
    assert names == sorted(["summary.json", "run_0.json", "run_1.json", "run_2.json",
                            "trace_0.csv", "trace_1.csv", "trace_2.csv", "trace_3.csv"])
    back = C.read_results(tmp_path / "b")
    assert back.runs == b.runs
    assert back.traces == b.traces
    assert back.baseline == b.baseline
    assert back.device == b.device
    assert json.dumps(back.aggregate, sort_keys=True) == json.dumps(
        json.loads(json.dumps(b.aggregate)), sort_keys=True)


def test_empty_bundle_rejected(tmp_path):
    b = _bundle(0)
    with pytest.raises(BundleError, match="bundle contains no runs"):
        C.write_results(b, tmp_path / "e")


def test_window_trace_mismatch(tmp_path):
    with pytest.raises(BundleError, match="window/trace mismatch"):
        C.write_results(_bundle(3, misalign=True), tmp_path / "m")


def test_incomplete_marker_rejected(tmp_path):
    d = tmp_path / "b"
    C.write_results(_bundle(3), d)
    assert not (d / C.INCOMPLETE_MARKER).exists()
    (d / C.INCOMPLETE_MARKER).write_text("")
    with pytest.raises(BundleError, match="incomplete"):
        C.read_results(d)


def test_interrupted_write_leaves_marker(tmp_path, monkeypatch):
    d = tmp_path / "b"
    calls = {"n": 0}
    real = C._atomic_write

    def flaky(path, data):
        calls["n"] += 1
        if calls["n"] == 3:
            raise OSError("disk full")
        real(path, data)

    monkeypatch.setattr(C, "_atomic_write", flaky)
    with pytest.raises(OSError):
        C.write_results(_bundle(3), d)
    assert (d / C.INCOMPLETE_MARKER).exists()
    with pytest.raises(BundleError):
        C.read_results(d)


def test_bundle_files_match_schemas(tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    d = tmp_path / "b"
    C.write_results(_bundle(3), d)
    jsonschema.validate(json.loads((d / "summary.json").read_text()), C.SUMMARY_SCHEMA)
    for k in range(3):
        jsonschema.validate(json.loads((d / f"run_{k}.json").read_text()), C.RUN_SCHEMA)
    head = (d / "trace_1.csv").read_text().splitlines()
    assert head[0] == "t_ns,watts"
    t, w = head[1].split(",")
    assert int(t) == 10 * S and float(w) == 100.0
