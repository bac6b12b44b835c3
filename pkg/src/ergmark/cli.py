"""Command-line interface: ``ergmark {run,list-devices,analyze,trend,make-workload}``.

Exit codes: 0 success, 1 usage, 2 validity failure, 3 device/provider
failure, 4 I/O or container error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .backend import HOST_DEVICE_ID, enumerate_devices
from .container import WORKLOAD_IDS, read_results, write_workload
from .energy import efficiency, fit_trend
from .errors import (
    BundleError,
    DeviceError,
    DispatchError,
    ErgmarkError,
    KernelError,
    ProviderError,
    TraceFormatError,
    WorkloadError,
)
from .orchestrator import RunConfig, analyze_bundle, run_benchmark
from .power import make_provider
from .workloads import SCALES, make_workload

log = logging.getLogger("ergmark")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_DEVICE, EXIT_IO = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out(*parts: str) -> Path:
    return Path(os.environ.get("ERGMARK_OUT", "ergmark-out")).joinpath(*parts)


def _slowdown(text: str) -> tuple[int, float]:
    run, _, factor = text.partition(":")
    return int(run), float(factor)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ergmark", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ergmark {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run the measurement protocol on one workload")
    r.add_argument("--workload", required=True,
                   help="workload container directory, or a workload id to generate in memory")
    r.add_argument("--device", default=HOST_DEVICE_ID)
    r.add_argument("--workers", type=int, default=None, help="override host worker count")
    r.add_argument("--runs", type=int, default=3)
    r.add_argument("--iterations", type=int, default=None)
    r.add_argument("--warmup", type=int, default=None,
                   help="warm-up iterations per run (default 1, 0 at paper scale)")
    r.add_argument("--power-provider", default="none",
                   choices=["counter", "trace", "bridge", "synthetic", "none"])
    r.add_argument("--counter-path")
    r.add_argument("--counter-max-range", type=int, default=None)
    r.add_argument("--trace-file")
    r.add_argument("--trace-voltage", type=float, default=None)
    r.add_argument("--trace-offset-s", type=float, default=0.0)
    r.add_argument("--bridge-cmd")
    r.add_argument("--synthetic-watts", type=float, default=100.0,
                   help="synthetic provider power while measuring")
    r.add_argument("--synthetic-idle-watts", type=float, default=20.0)
    r.add_argument("--sample-hz", type=float, default=10.0)
    r.add_argument("--baseline-seconds", type=float, default=5.0)
    r.add_argument("--psu-efficiency", type=float, default=None)
    r.add_argument("--legacy-external", action="store_true")
    r.add_argument("--window", choices=["kernel", "extended"], default="kernel")
    r.add_argument("--tail-seconds", type=float, default=1.0)
    r.add_argument("--verify", action="store_true")
    r.add_argument("--allow-fewer-runs", action="store_true")
    r.add_argument("--scale", choices=SCALES, default="desk")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, default=None)
    r.add_argument("--inject-slowdown", type=_slowdown, action="append", default=[],
                   help=argparse.SUPPRESS)
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("list-devices", help="list compute devices")
    d.add_argument("--workers", type=int, default=None)
    d.add_argument("--json", action="store_true")
    d.set_defaults(func=cmd_list_devices)

    a = sub.add_parser("analyze", help="recompute energies from stored bundles")
    a.add_argument("bundles", nargs="+", type=Path)
    a.add_argument("--out", type=Path, default=None, help="write the JSON report here")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("trend", help="fit efficiency = a*exp(r*t) over release years")
    t.add_argument("csv", nargs="?", type=Path, help="CSV with header 'year,efficiency'")
    t.add_argument("--example", choices=["cpu", "gpu"],
                   help="use the bundled synthetic efficiency data")
    t.add_argument("--bundle", nargs=2, action="append", metavar=("DIR", "YEAR"), default=[],
                   help="stored result bundle and the device release year")
    t.add_argument("--reference-year", type=float, default=None)
    t.add_argument("--out", type=Path, default=None)
    t.set_defaults(func=cmd_trend)

    m = sub.add_parser("make-workload", help="generate canonical workload containers")
    m.add_argument("workload", choices=list(WORKLOAD_IDS) + ["all"])
    m.add_argument("--scale", choices=SCALES, default="desk")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--precision", choices=["int16", "f32", "f64"], default=None)
    m.add_argument("--iterations", type=int, default=None)
    m.add_argument("--out", type=Path, default=None)
    m.set_defaults(func=cmd_make_workload)
    return p


# --------------------------------------------------------------------------


def cmd_run(args) -> int:
    provider = make_provider(
        args.power_provider,
        idle_watts=args.synthetic_idle_watts,
        load_watts=args.synthetic_watts,
        counter_path=args.counter_path,
        counter_max_range=args.counter_max_range,
        trace_file=args.trace_file,
        trace_voltage=args.trace_voltage,
        trace_offset_s=args.trace_offset_s,
        bridge_cmd=args.bridge_cmd,
    )
    warmup = args.warmup if args.warmup is not None else (0 if args.scale == "paper" else 1)
    out = args.out
    if out is None:
        name = Path(args.workload).name
        out = _default_out(f"{name}-results")
    try:
        cfg = RunConfig(
            workload=args.workload,
            device_id=args.device,
            runs=args.runs,
            iterations=args.iterations,
            warmup_iterations=warmup,
            provider=provider,
            provider_name=args.power_provider,
            sample_hz=args.sample_hz,
            baseline_seconds=args.baseline_seconds,
            psu_efficiency=args.psu_efficiency,
            legacy_external=args.legacy_external,
            window=args.window,
            tail_seconds=args.tail_seconds,
            out=out,
            verify=args.verify,
            allow_fewer_runs=args.allow_fewer_runs,
            worker_count=args.workers,
            scale=args.scale,
            seed=args.seed,
            slowdown=dict(args.inject_slowdown),
        )
    except ValueError as exc:
        print(f"ergmark run: {exc}", file=sys.stderr)
        return EXIT_USAGE
    bundle = run_benchmark(cfg)
    writer = csv.writer(sys.stdout)
    writer.writerow(["run", "kernel_ns", "time_to_solution_ns", "joules", "energy_status",
                     "output_checksum"])
    for r in bundle.runs:
        joules = "" if r.energy is None else repr(r.energy.joules_corrected)
        writer.writerow([r.index, r.timing.kernel_ns, r.timing.time_to_solution_ns, joules,
                         r.energy_status, r.output_checksum[:16]])
    agg = bundle.aggregate
    for metric, rep in agg["validity"].items():
        if rep is not None:
            dev = rep["max_rel_dev"]
            dev_s = "n/a" if dev is None else f"{dev:.4f}"
            print(f"# validity {metric}: {'PASS' if rep['valid'] else 'FAIL'} "
                  f"max_rel_dev={dev_s} {rep['diagnostic']}".rstrip())
    print(f"# bundle: {out}")
    return EXIT_OK if bundle.valid else EXIT_INVALID


def cmd_list_devices(args) -> int:
    devices = enumerate_devices(args.workers)
    if args.json:
        print(json.dumps([d.to_dict() for d in devices], indent=2))
        return EXIT_OK
    writer = csv.writer(sys.stdout)
    writer.writerow(["id", "kind", "name", "worker_count", "supports_f64"])
    for d in devices:
        writer.writerow([d.id, d.kind, d.name, d.worker_count, d.supports_f64])
    return EXIT_OK


def cmd_analyze(args) -> int:
    reports = [analyze_bundle(b) for b in args.bundles]
    text = json.dumps(reports if len(reports) > 1 else reports[0], indent=2, default=_json_default)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def _json_default(o):
    if isinstance(o, float):
        return None
    raise TypeError(type(o))


def _read_trend_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [c.strip().lower() for c in next(reader, [])]
        if header != ["year", "efficiency"]:
            raise TraceFormatError(f"{path}: expected header 'year,efficiency'")
        pts = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pts.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                raise TraceFormatError(f"{path}: bad row at line {lineno}", [lineno]) from None
    return pts


def example_trend_path(kind: str):
    return resources.files("ergmark") / "data" / f"synthetic_efficiency_{kind}.csv"


def cmd_trend(args) -> int:
    points = []
    if args.example:
        with resources.as_file(example_trend_path(args.example)) as p:
            points.extend(_read_trend_csv(p))
    if args.csv:
        points.extend(_read_trend_csv(args.csv))
    for directory, year in args.bundle:
        bundle = read_results(directory)
        energy = bundle.aggregate.get("energy_j")
        if not energy:
            raise BundleError(f"bundle {directory} has no energy results")
        points.append((float(year), efficiency(energy["mean"])))
    if not points:
        print("ergmark trend: give a CSV, --example or --bundle", file=sys.stderr)
        return EXIT_USAGE
    fit = fit_trend(points, args.reference_year)
    text = json.dumps(fit.to_dict(), indent=2)
    if args.out:
        args.out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_make_workload(args) -> int:
    ids = list(WORKLOAD_IDS) if args.workload == "all" else [args.workload]
    for wid in ids:
        if args.workload == "all":
            out = (args.out or _default_out("workloads")) / f"{wid}-{args.scale}"
        else:
            out = args.out or _default_out("workloads", f"{wid}-{args.scale}")
        precision = args.precision if args.workload != "all" else None
        manifest, blobs = make_workload(wid, args.scale, args.seed, precision, args.iterations)
        path = write_workload(manifest, blobs, out)
        print(path.parent)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DeviceError, ProviderError, KernelError, DispatchError) as exc:
        print(f"ergmark: {exc}", file=sys.stderr)
        return EXIT_DEVICE
    except (WorkloadError, BundleError, TraceFormatError, OSError) as exc:
        print(f"ergmark: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ErgmarkError, ValueError) as exc:
        print(f"ergmark: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
