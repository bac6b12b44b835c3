"""Workload containers and result bundles on disk.

A workload container is a directory holding ``workload.json`` and one raw
little-endian ``<name>.bin`` file per data blob.  The manifest carries a
64-bit FNV-1a checksum of its own canonical JSON form.

A result bundle is a directory with ``summary.json``, one ``run_<k>.json``
per repetition and one ``trace_<k>.csv`` (``t_ns,watts``) per power trace.
While a bundle is being written it contains an ``.incomplete`` marker.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .backend import DeviceDescriptor, TimingRecord
from .energy import EnergyResult
from .errors import BundleError, WorkloadError
from .power import BaselineEstimate, PowerTrace

WORKLOAD_FORMAT = "ergmark-workload/1"
BUNDLE_FORMAT = "ergmark-bundle/1"
MANIFEST_NAME = "workload.json"
SUMMARY_NAME = "summary.json"
INCOMPLETE_MARKER = ".incomplete"

WORKLOAD_IDS = ("median2d", "dot", "xcorr", "rk2d")
PRECISIONS = ("int16", "f32", "f64")

# mandatory params per workload, with their scalar kind
WORKLOAD_PARAMS: dict[str, dict[str, type]] = {
    "median2d": {"window_n": int, "width": int, "height": int},
    "dot": {"vector_len": int},
    "xcorr": {"vector_len": int, "lag_range": int},
    "rk2d": {"grid_nx": int, "grid_ny": int, "dt": float, "steps": int,
             "velocity_x": float, "velocity_y": float},
}
WORKLOAD_PRECISIONS = {
    "median2d": ("int16",),
    "dot": ("f32", "f64"),
    "xcorr": ("f32", "f64"),
    "rk2d": ("f32", "f64"),
}
WORKLOAD_BLOBS = {
    "median2d": ("image",),
    "dot": ("x", "y"),
    "xcorr": ("x", "y"),
    "rk2d": ("u0",),
}
BLOB_DTYPES = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
PRECISION_BLOB_DTYPE = {"int16": "u16", "f32": "f32", "f64": "f64"}

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def fnv1a64_hex(data: bytes) -> str:
    return f"{fnv1a64(data):016x}"


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _pretty_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()


# --------------------------------------------------------------------------
# workload containers


@dataclass(frozen=True)
class DataBlob:
    name: str
    dtype: str
    shape: tuple

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * BLOB_DTYPES[self.dtype].itemsize


@dataclass(frozen=True)
class WorkloadManifest:
    workload_id: str
    precision: str
    params: dict
    iterations: int = 1
    blob_refs: tuple = ()

    def to_dict(self) -> dict:
        return {
            "format": WORKLOAD_FORMAT,
            "workload_id": self.workload_id,
            "precision": self.precision,
            "params": dict(self.params),
            "iterations": self.iterations,
            "blobs": [{"name": b.name, "dtype": b.dtype, "shape": list(b.shape)}
                      for b in self.blob_refs],
        }


@dataclass
class Workload:
    manifest: WorkloadManifest
    blobs: dict
    manifest_hash: str = ""
    path: Optional[Path] = None

    @property
    def workload_id(self) -> str:
        return self.manifest.workload_id

    @property
    def precision(self) -> str:
        return self.manifest.precision

    @property
    def params(self) -> dict:
        return self.manifest.params


def _fail(code: str, msg: str):
    raise WorkloadError(code, msg)


def _expected_shape(workload_id: str, name: str, params: dict) -> tuple:
    if workload_id == "median2d":
        return (params["height"], params["width"])
    if workload_id in ("dot", "xcorr"):
        return (params["vector_len"],)
    return (params["grid_nx"], params["grid_ny"])


def validate_manifest(doc: Any) -> WorkloadManifest:
    """Turn a parsed manifest document into a :class:`WorkloadManifest`.

    Raises :class:`WorkloadError` for any structural or semantic problem.
    """
    if not isinstance(doc, dict):
        _fail("malformed", "manifest must be a JSON object")
    if doc.get("format") != WORKLOAD_FORMAT:
        _fail("malformed", f"unsupported manifest format {doc.get('format')!r}")
    allowed = {"format", "workload_id", "precision", "params", "iterations", "blobs", "checksum"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        _fail("malformed", f"unknown manifest fields: {unknown}")
    wid = doc.get("workload_id")
    if not isinstance(wid, str) or wid not in WORKLOAD_IDS:
        _fail("unknown_workload", f"unknown workload_id {wid!r}; expected one of {WORKLOAD_IDS}")
    prec = doc.get("precision")
    if not isinstance(prec, str) or prec not in PRECISIONS:
        _fail("unknown_precision", f"unknown precision {prec!r}")
    if prec not in WORKLOAD_PRECISIONS[wid]:
        _fail("unsupported_precision",
              f"precision unsupported for workload: {wid} does not support {prec}")
    iters = doc.get("iterations", 1)
    if not isinstance(iters, int) or isinstance(iters, bool) or iters < 1:
        _fail("bad_iterations", f"iterations must be a positive integer, got {iters!r}")

    params = doc.get("params")
    if not isinstance(params, dict):
        _fail("malformed", "params must be an object")
    spec = WORKLOAD_PARAMS[wid]
    missing = sorted(set(spec) - set(params))
    if missing:
        _fail("missing_params", f"missing params for {wid}: {', '.join(missing)}")
    extra = sorted(set(params) - set(spec))
    if extra:
        _fail("extra_params", f"unexpected params for {wid}: {', '.join(extra)}")
    clean = {}
    for key, kind in spec.items():
        v = params[key]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            _fail("bad_param", f"param {key} must be numeric, got {v!r}")
        if kind is int:
            if not isinstance(v, int):
                _fail("bad_param", f"param {key} must be an integer, got {v!r}")
        else:
            v = float(v)
            if not math.isfinite(v):
                _fail("bad_param", f"param {key} must be finite")
        clean[key] = v
    _check_param_ranges(wid, clean)

    blobs = doc.get("blobs")
    if not isinstance(blobs, list):
        _fail("malformed", "blobs must be a list")
    refs = []
    seen = set()
    for b in blobs:
        if not isinstance(b, dict) or set(b) - {"name", "dtype", "shape", "sha256"}:
            _fail("malformed", f"bad blob entry {b!r}")
        name, dtype, shape = b.get("name"), b.get("dtype"), b.get("shape")
        if not isinstance(name, str) or not _NAME_RE.match(name) or name in seen:
            _fail("malformed", f"bad or duplicate blob name {name!r}")
        seen.add(name)
        if dtype not in BLOB_DTYPES:
            _fail("blob_mismatch", f"blob {name}: unknown dtype {dtype!r}")
        if (not isinstance(shape, list) or len(shape) not in (1, 2)
                or not all(isinstance(s, int) and not isinstance(s, bool) and s > 0
                           for s in shape)):
            _fail("blob_mismatch", f"blob {name}: shape must be 1 or 2 positive integers")
        refs.append(DataBlob(name, dtype, tuple(shape)))
    names = {r.name for r in refs}
    want = set(WORKLOAD_BLOBS[wid])
    if names != want:
        _fail("blob_mismatch", f"{wid} needs blobs {sorted(want)}, manifest has {sorted(names)}")
    for r in refs:
        exp_dtype = PRECISION_BLOB_DTYPE[prec]
        if r.dtype != exp_dtype:
            _fail("blob_mismatch", f"blob {r.name}: dtype {r.dtype} does not match "
                                   f"precision {prec} (expected {exp_dtype})")
        exp_shape = _expected_shape(wid, r.name, clean)
        if r.shape != exp_shape:
            _fail("blob_mismatch", f"blob {r.name}: shape {list(r.shape)} does not match "
                                   f"params (expected {list(exp_shape)})")
    refs.sort(key=lambda r: WORKLOAD_BLOBS[wid].index(r.name))
    return WorkloadManifest(wid, prec, clean, iters, tuple(refs))


def _check_param_ranges(wid: str, p: dict) -> None:
    def positive(*keys):
        for k in keys:
            if p[k] <= 0:
                _fail("bad_param", f"param {k} must be positive, got {p[k]}")

    if wid == "median2d":
        positive("width", "height", "window_n")
        n = p["window_n"]
        if n < 3 or n % 2 == 0:
            _fail("bad_param", f"window_n must be odd and >= 3, got {n}")
        if n > 2 * min(p["width"], p["height"]) - 1:
            _fail("bad_param", f"window_n {n} too large for the image")
    elif wid == "dot":
        positive("vector_len")
    elif wid == "xcorr":
        positive("vector_len")
        if p["lag_range"] < 0:
            _fail("bad_param", "lag_range must be >= 0")
    else:
        positive("grid_nx", "grid_ny", "dt", "steps")
        cfl = (abs(p["velocity_x"]) * p["dt"] * p["grid_nx"]
               + abs(p["velocity_y"]) * p["dt"] * p["grid_ny"])
        if cfl > 1.0 + 1e-12:
            _fail("bad_param", f"CFL number {cfl:.4g} exceeds 1")


def read_workload(path: Union[str, Path]) -> Workload:
    """Load and fully validate a workload container (directory or manifest path)."""
    path = Path(path)
    mpath = path / MANIFEST_NAME if path.is_dir() or not path.suffix else path
    if not mpath.is_file():
        _fail("missing_file", f"workload manifest {mpath} not found")
    raw = mpath.read_bytes()
    try:
        doc = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        _fail("malformed", f"manifest is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        _fail("malformed", "manifest must be a JSON object")
    stored = doc.get("checksum")
    body = {k: v for k, v in doc.items() if k != "checksum"}
    try:
        actual = fnv1a64_hex(canonical_json(body))
    except ValueError as exc:
        _fail("malformed", f"manifest contains non-finite numbers: {exc}")
    if stored != actual:
        _fail("checksum_mismatch", f"manifest checksum mismatch: stored {stored!r}, "
                                   f"computed {actual!r}")
    manifest = validate_manifest(body)
    blob_meta = {b["name"]: b for b in body["blobs"]}
    blobs = {}
    for ref in manifest.blob_refs:
        bpath = mpath.parent / f"{ref.name}.bin"
        if not bpath.is_file():
            _fail("missing_blob", f"blob file {bpath} not found")
        data = bpath.read_bytes()
        if len(data) != ref.nbytes:
            _fail("blob_mismatch", f"blob {ref.name}: {len(data)} bytes, expected {ref.nbytes}")
        digest = blob_meta[ref.name].get("sha256")
        if digest is not None and hashlib.sha256(data).hexdigest() != digest:
            _fail("blob_checksum_mismatch", f"blob {ref.name} content does not match its digest")
        arr = np.frombuffer(data, dtype=BLOB_DTYPES[ref.dtype]).reshape(ref.shape)
        blobs[ref.name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return Workload(manifest, blobs, fnv1a64_hex(raw), mpath.parent)


def write_workload(manifest: WorkloadManifest, blobs: dict, directory: Union[str, Path]) -> Path:
    """Write a container; output bytes depend only on the inputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = manifest.to_dict()
    for entry in doc["blobs"]:
        arr = np.ascontiguousarray(blobs[entry["name"]], dtype=BLOB_DTYPES[entry["dtype"]])
        data = arr.tobytes()
        entry["sha256"] = hashlib.sha256(data).hexdigest()
        (directory / f"{entry['name']}.bin").write_bytes(data)
    validate_manifest(doc)
    doc["checksum"] = fnv1a64_hex(canonical_json(doc))
    mpath = directory / MANIFEST_NAME
    mpath.write_bytes(_pretty_json(doc))
    return mpath


# --------------------------------------------------------------------------
# result bundles


@dataclass
class RunRecord:
    index: int
    timing: TimingRecord
    energy: Optional[EnergyResult]
    trace_index: Optional[int]
    output_checksum: str
    conforming: bool
    config_key: tuple
    anchors: tuple
    iteration_ns: list = field(default_factory=list)
    energy_status: str = "ok"  # ok | degraded | unavailable
    verified: Optional[bool] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "timing": self.timing.to_dict(),
            "time_to_solution_ns": self.timing.time_to_solution_ns,
            "energy": None if self.energy is None else self.energy.to_dict(),
            "trace_index": self.trace_index,
            "output_checksum": self.output_checksum,
            "conforming": self.conforming,
            "config_key": list(self.config_key),
            "anchors": list(self.anchors),
            "iteration_ns": list(self.iteration_ns),
            "energy_status": self.energy_status,
            "verified": self.verified,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            index=d["index"],
            timing=TimingRecord.from_dict(d["timing"]),
            energy=None if d["energy"] is None else EnergyResult.from_dict(d["energy"]),
            trace_index=d["trace_index"],
            output_checksum=d["output_checksum"],
            conforming=d["conforming"],
            config_key=tuple(d["config_key"]),
            anchors=tuple(d["anchors"]),
            iteration_ns=list(d.get("iteration_ns", [])),
            energy_status=d.get("energy_status", "ok"),
            verified=d.get("verified"),
        )


@dataclass
class ResultBundle:
    manifest_hash: str
    device: DeviceDescriptor
    runs: list
    aggregate: dict
    traces: list = field(default_factory=list)
    baseline: Optional[BaselineEstimate] = None
    baseline_trace_index: Optional[int] = None
    config: dict = field(default_factory=dict)
    workload: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return bool(self.aggregate.get("valid", False))

    def summary_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "manifest_hash": self.manifest_hash,
            "device": self.device.to_dict(),
            "workload": self.workload,
            "config": self.config,
            "baseline": None if self.baseline is None else self.baseline.to_dict(),
            "baseline_trace_index": self.baseline_trace_index,
            "aggregate": self.aggregate,
            "runs": [f"run_{r.index}.json" for r in self.runs],
            "traces": [dict(t.metadata(), file=f"trace_{k}.csv")
                       for k, t in enumerate(self.traces)],
            "valid": self.valid,
        }


def check_bundle(bundle: ResultBundle) -> None:
    """Structural consistency checks shared by write and read."""
    if not bundle.runs:
        raise BundleError("bundle contains no runs")
    n = len(bundle.traces)
    indices = [r.index for r in bundle.runs]
    if len(set(indices)) != len(indices):
        raise BundleError("duplicate run indices")
    if bundle.baseline_trace_index is not None and not 0 <= bundle.baseline_trace_index < n:
        raise BundleError("baseline trace index out of range")
    for r in bundle.runs:
        if r.trace_index is None:
            if r.energy is not None:
                raise BundleError(f"run {r.index} has energy but no trace")
            continue
        if not 0 <= r.trace_index < n:
            raise BundleError(f"run {r.index} references missing trace {r.trace_index}")
        if r.energy is None:
            continue
        trace = bundle.traces[r.trace_index]
        a, b = r.energy.window
        if len(trace) < 2:
            raise BundleError(f"window/trace mismatch in run {r.index}: trace too short")
        t0, t1 = trace.span
        # only a run that claims full coverage must lie inside its trace
        if r.energy.coverage >= 1.0 and not (t0 <= a and b <= t1):
            raise BundleError(
                f"window/trace mismatch in run {r.index}: window [{a}, {b}] "
                f"not inside trace [{t0}, {t1}]"
            )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_results(bundle: ResultBundle, directory: Union[str, Path]) -> list[Path]:
    """Persist ``bundle``; returns the written file paths (summary first)."""
    check_bundle(bundle)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    marker = directory / INCOMPLETE_MARKER
    marker.write_text("bundle write in progress\n")
    for stale in list(directory.glob("run_*.json")) + list(directory.glob("trace_*.csv")):
        stale.unlink()
    written = []
    for k, trace in enumerate(bundle.traces):
        p = directory / f"trace_{k}.csv"
        _atomic_write(p, trace.to_csv().encode())
        written.append(p)
    for r in bundle.runs:
        p = directory / f"run_{r.index}.json"
        _atomic_write(p, _pretty_json(r.to_dict()))
        written.append(p)
    summary = directory / SUMMARY_NAME
    _atomic_write(summary, _pretty_json(bundle.summary_dict()))
    marker.unlink()
    return [summary] + written


def read_results(directory: Union[str, Path]) -> ResultBundle:
    directory = Path(directory)
    if (directory / INCOMPLETE_MARKER).exists():
        raise BundleError(f"bundle {directory} is incomplete (interrupted write)")
    spath = directory / SUMMARY_NAME
    if not spath.is_file():
        raise BundleError(f"no {SUMMARY_NAME} in {directory}")
    try:
        summary = json.loads(spath.read_text())
        if summary.get("format") != BUNDLE_FORMAT:
            raise BundleError(f"unsupported bundle format {summary.get('format')!r}")
        traces = []
        for meta in summary["traces"]:
            text = (directory / meta["file"]).read_text()
            traces.append(PowerTrace.from_csv(text, meta))
        runs = [RunRecord.from_dict(json.loads((directory / name).read_text()))
                for name in summary["runs"]]
    except BundleError:
        raise
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise BundleError(f"cannot read bundle {directory}: {exc}") from exc
    bundle = ResultBundle(
        manifest_hash=summary["manifest_hash"],
        device=DeviceDescriptor.from_dict(summary["device"]),
        runs=runs,
        aggregate=summary["aggregate"],
        traces=traces,
        baseline=None if summary["baseline"] is None
        else BaselineEstimate.from_dict(summary["baseline"]),
        baseline_trace_index=summary["baseline_trace_index"],
        config=summary["config"],
        workload=summary["workload"],
    )
    check_bundle(bundle)
    return bundle


# JSON Schemas for the bundle files (draft 2020-12).
RUN_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["index", "timing", "time_to_solution_ns", "energy", "trace_index",
                 "output_checksum", "conforming", "config_key", "anchors", "energy_status"],
    "properties": {
        "index": {"type": "integer", "minimum": 0},
        "timing": {
            "type": "object",
            "required": ["kernel_ns", "transfer_ns", "wall_ns", "iterations"],
            "properties": {
                "kernel_ns": {"type": "integer", "minimum": 0},
                "transfer_ns": {"type": "integer", "minimum": 0},
                "wall_ns": {"type": "integer", "minimum": 0},
                "iterations": {"type": "integer", "minimum": 1},
            },
        },
        "time_to_solution_ns": {"type": "integer", "minimum": 0},
        "energy": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["joules_raw", "joules_net", "joules_corrected",
                                 "corrections", "window", "coverage"],
                    "properties": {
                        "joules_raw": {"type": "number", "minimum": 0},
                        "joules_net": {"type": "number", "minimum": 0},
                        "joules_corrected": {"type": "number", "minimum": 0},
                        "corrections": {
                            "type": "array",
                            "items": {
                                "type": "object",
                                "required": ["kind", "factor"],
                                "properties": {
                                    "kind": {"enum": ["psu_efficiency", "legacy_external"]},
                                    "factor": {"type": "number"},
                                },
                            },
                        },
                        "window": {"type": "array", "items": {"type": "integer"},
                                   "minItems": 2, "maxItems": 2},
                        "coverage": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                },
            ]
        },
        "trace_index": {"type": ["integer", "null"]},
        "output_checksum": {"type": "string"},
        "conforming": {"type": "boolean"},
        "config_key": {"type": "array", "items": {"type": "string"}},
        "anchors": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "energy_status": {"enum": ["ok", "degraded", "unavailable"]},
    },
}

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["format", "manifest_hash", "device", "workload", "config", "baseline",
                 "aggregate", "runs", "traces", "valid"],
    "properties": {
        "format": {"const": BUNDLE_FORMAT},
        "manifest_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "device": {
            "type": "object",
            "required": ["id", "kind", "name", "worker_count", "supports_f64"],
        },
        "workload": {"type": "object", "required": ["workload_id", "precision", "iterations"]},
        "aggregate": {
            "type": "object",
            "required": ["n_runs", "time_ns", "validity", "valid"],
        },
        "runs": {"type": "array", "minItems": 1, "items": {"type": "string"}},
        "traces": {
            "type": "array",
            "items": {"type": "object", "required": ["file", "provider", "nominal_rate_hz"]},
        },
        "valid": {"type": "boolean"},
    },
}
