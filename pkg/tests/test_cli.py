import json
import math
import subprocess
import sys

import pytest

from ergmark.cli import main


def _files(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_make_workload_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["make-workload", "median2d", "--scale", "desk", "--seed", "42",
                     "--out", str(tmp_path / name)]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"workload.json", "image.bin"}
    assert a == b


def test_make_workload_seed_changes_data(tmp_path):
    main(["make-workload", "dot", "--seed", "1", "--iterations", "2", "--out", str(tmp_path / "a")])
    main(["make-workload", "dot", "--seed", "2", "--iterations", "2", "--out", str(tmp_path / "b")])
    assert _files(tmp_path / "a")["x.bin"] != _files(tmp_path / "b")["x.bin"]


def test_make_workload_all_uses_env_out(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ERGMARK_OUT", str(tmp_path / "env"))
    assert main(["make-workload", "all"]) == 0
    made = sorted(p.name for p in (tmp_path / "env" / "workloads").iterdir())
    assert made == ["dot-desk", "median2d-desk", "rk2d-desk", "xcorr-desk"]


def test_make_workload_bad_precision(tmp_path, capsys):
    rc = main(["make-workload", "median2d", "--precision", "f32", "--out", str(tmp_path / "m")])
    assert rc == 4
    assert "precision unsupported for workload" in capsys.readouterr().err


def test_list_devices(capsys):
    assert main(["list-devices", "--workers", "3"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "id,kind,name,worker_count,supports_f64"
    assert out[1].startswith("host:cpu,cpu_host,")
    assert main(["list-devices", "--json"]) == 0
    devs = json.loads(capsys.readouterr().out)
    assert devs[0]["id"] == "host:cpu"


def _run_args(tmp_path, *extra):
    return ["run", "--workload", "dot", "--iterations", "60", "--baseline-seconds", "3",
            "--out", str(tmp_path / "bundle"), *extra]


def _check_exit_matches_verdict(rc, out):
    # three runs on a shared machine may legitimately disagree by >15%;
    # either way the exit code has to follow the printed verdicts
    verdicts = [line.split()[3] for line in out.splitlines() if line.startswith("# validity ")]
    assert verdicts and set(verdicts) <= {"PASS", "FAIL"}, out
    assert rc == (0 if all(v == "PASS" for v in verdicts) else 2), out


def test_run_and_analyze_idempotent(tmp_path, capsys):
    rc = main(_run_args(tmp_path, "--power-provider", "synthetic", "--psu-efficiency", "0.9"))
    out = capsys.readouterr().out
    _check_exit_matches_verdict(rc, out)
    lines = out.splitlines()
    assert lines[0].startswith("run,kernel_ns,time_to_solution_ns,joules")
    assert sum(1 for line in lines if line[:1].isdigit()) == 3

    assert main(["analyze", str(tmp_path / "bundle"), "--out", str(tmp_path / "rep.json")]) == 0
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["max_rel_diff"] <= 1e-9
    for run in rep["runs"]:
        assert run["recomputed"]["joules_corrected"] == run["stored"]["joules_corrected"]
    # re-analysis is idempotent
    capsys.readouterr()
    main(["analyze", str(tmp_path / "bundle")])
    assert json.loads(capsys.readouterr().out) == rep


def test_run_without_provider(tmp_path, capsys):
    _check_exit_matches_verdict(main(_run_args(tmp_path)), capsys.readouterr().out)
    summary = json.loads((tmp_path / "bundle" / "summary.json").read_text())
    assert summary["aggregate"]["energy_j"] is None


def test_exit_code_validity(tmp_path, capsys):
    assert main(_run_args(tmp_path, "--inject-slowdown", "1:0.3")) == 2
    assert "# validity time: FAIL" in capsys.readouterr().out


def test_exit_code_usage(tmp_path, capsys):
    assert main(_run_args(tmp_path, "--runs", "2")) == 1
    with pytest.raises(SystemExit) as info:
        main(["run"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 1


def test_exit_code_device(tmp_path, capsys):
    assert main(_run_args(tmp_path, "--device", "ocl:9:9")) == 3
    assert main(_run_args(tmp_path, "--power-provider", "counter",
                          "--counter-path", str(tmp_path / "missing"))) == 3


def test_exit_code_io(tmp_path, capsys):
    assert main(["run", "--workload", str(tmp_path / "nope")]) == 4
    assert main(["analyze", str(tmp_path / "nope")]) == 4
    bad = tmp_path / "bad.csv"
    bad.write_text("year,eff\n2010,1\n")
    assert main(["trend", str(bad)]) == 4


def test_trend_bundled_example(capsys):
    assert main(["trend", "--example", "cpu"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert abs(fit["r"] - math.log(1.22) / 2) <= 1e-9
    assert main(["trend", "--example", "gpu", "--reference-year", "2015"]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert abs(fit["r"] - math.log(1.5) / 2) <= 1e-9
    assert fit["a"] == pytest.approx(1e-2, rel=1e-9)


def test_trend_csv_file(tmp_path, capsys):
    f = tmp_path / "pts.csv"
    f.write_text("year,efficiency\n" + "".join(
        f"{y},{2.0 * math.exp(0.3 * (y - 2012))!r}\n" for y in range(2010, 2016)))
    assert main(["trend", str(f), "--out", str(tmp_path / "fit.json")]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["r"] == pytest.approx(0.3, abs=1e-12)
    assert fit["n_points"] == 6


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ergmark", "--version"], capture_output=True,
                         text=True, check=True)
    assert out.stdout.startswith("ergmark ")
