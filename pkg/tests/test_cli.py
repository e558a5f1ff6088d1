import argparse
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from vbspin.cli import EXIT_NOT_CONVERGED, EXIT_OK, EXIT_USAGE, main, parse_power, parse_range


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_parse_power():
    assert parse_power("10mW") == 10.0
    assert parse_power("0.02W") == 20.0
    assert parse_power("500uW") == 0.5
    assert parse_power("7") == 7.0
    for bad in ("ten", "-1mW", "0"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_power(bad)


def test_parse_range():
    assert parse_range("60:70:2").tolist() == [60, 62, 64, 66, 68, 70]
    assert parse_range("3,1,2").tolist() == [1, 2, 3]
    for bad in ("5:1:1", "1:5:0", ",", "1:2", "a:b:c"):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_range(bad)


def test_presets(capsys):
    code, out, _ = run(capsys, "presets", "list")
    assert code == EXIT_OK and "vb-this-work" in out.split()
    code, out, _ = run(capsys, "presets", "show", "vb-this-work")
    assert code == EXIT_OK and json.loads(out)["tau0_ns"] == pytest.approx(1.178, abs=1e-3)
    code, _, err = run(capsys, "presets", "show", "vb-nowhere")
    assert code == EXIT_USAGE and "vb-nowhere" in err


def test_unknown_preset_exits_usage(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", "trace", "--preset", "bogus", "--out", tmp_path)
    assert code == EXIT_USAGE and "bogus" in err


def test_empty_range_exits_usage(capsys, tmp_path):
    code, _, _ = run(capsys, "sweep", "--bz", "80:60:2", "--out", tmp_path)
    assert code == EXIT_USAGE


def test_bad_config_exits_usage(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text("{not json")
    code, _, err = run(capsys, "simulate", "trace", "--config", cfg, "--out", tmp_path / "o")
    assert code == EXIT_USAGE and err


def test_simulate_outputs_and_manifest(capsys, tmp_path):
    out = tmp_path / "a"
    code, _, _ = run(capsys, "simulate", "spin-resolved", "--power", "20mW", "--isotope", "14n",
                     "--step", "100", "--out", out, "--plot")
    assert code == EXIT_OK
    lines = (out / "spin_resolved.csv").read_text().splitlines()
    assert lines[0] == "t_ns,P0,P+1,P-1" and len(lines) == 17
    assert (out / "spin_resolved.png").stat().st_size > 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"][:3] == ["vbspin", "simulate", "spin-resolved"]
    assert man["presets"] == ["vb-this-work"] and len(man["config_hash"]) == 64
    assert man["outputs"]
    for p, digest in man["outputs"].items():
        assert sha(p) == digest


def test_simulate_is_deterministic(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "simulate", "suite", "--powers", "10,30", "--step", "150", "--out",
                   tmp_path / d)[0] == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_differential_and_trace(capsys, tmp_path):
    code, out, _ = run(capsys, "simulate", "differential", "--out", tmp_path)
    assert code == EXIT_OK and "tau0 = 1.17" in out
    meta = json.loads((tmp_path / "differential.json").read_text())
    assert meta["fit"]["tau1"] == pytest.approx(0.468, abs=0.005)
    code, _, _ = run(capsys, "simulate", "trace", "--t-end", "400", "--out", tmp_path)
    rows = np.loadtxt(tmp_path / "trace.csv", delimiter=",", skiprows=1)
    assert code == EXIT_OK and rows[-1, 2] == 1.0


def test_simulate_odmr(capsys, tmp_path):
    code, _, _ = run(capsys, "simulate", "odmr", "--system", "vb-15n", "--bz", "32", "--fmin", "2400",
                     "--fmax", "2700", "--points", "61", "--out", tmp_path)
    assert code == EXIT_OK
    meta = json.loads((tmp_path / "odmr.json").read_text())
    assert sum(1 for ln in meta["lines"] if ln["transition"] == -1) == 4


def test_sweep_cache_resume(capsys, tmp_path):
    args = ["sweep", "--system", "vb-bare", "--bz", "10:16:2", "--theta", "0", "--t-end", "300",
            "--out", tmp_path, "--cache", tmp_path / "cache"]
    code, out, _ = run(capsys, *args)
    assert code == EXIT_OK and "4 computed, 0 from cache" in out
    first = (tmp_path / "timescale_map.csv").read_bytes()
    pts = sorted((tmp_path / "cache").glob("pt_*.json"))
    for p in pts[:2]:
        p.unlink()
    code, out, _ = run(capsys, *args)
    assert code == EXIT_OK and "2 computed, 2 from cache" in out
    assert (tmp_path / "timescale_map.csv").read_bytes() == first
    # the same cache with different settings is refused
    code, _, err = run(capsys, *args, "--threshold", "0.5")
    assert code == EXIT_USAGE and "different settings" in err


def test_fit_corrupt_csv(capsys, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "x.csv").write_text("t_ns,signal\n0,1\n5,oops\n")
    (data / "x.json").write_text(json.dumps({"kind": "pl_trace", "power_mW": 1.0}))
    code, _, err = run(capsys, "fit", data, "--out", tmp_path / "o")
    assert code == EXIT_USAGE and "x.csv:3:" in err


def test_fit_missing_dir(capsys, tmp_path):
    assert run(capsys, "fit", tmp_path / "none", "--out", tmp_path / "o")[0] == EXIT_USAGE


def test_fit_fixed_r(capsys, tmp_path):
    data = tmp_path / "data"
    assert run(capsys, "simulate", "suite", "--powers", "10,30", "--step", "60", "--out", data)[0] == 0
    (data / "truth.json").unlink()
    code, out, _ = run(capsys, "fit", data, "--fix", "r=0", "--starts", "2", "--out", tmp_path / "fit")
    assert code == EXIT_OK, out
    rep = json.loads((tmp_path / "fit" / "fit_report.json").read_text())
    assert rep["parameters"]["r"] == 0.0
    assert rep["derived"]["gamma_E"] == pytest.approx(849.0, rel=0.1)
    assert (tmp_path / "fit" / "fit_summary.txt").read_text().startswith("parameter")
    code, _, err = run(capsys, "fit", data, "--fix", "q=1", "--out", tmp_path / "fit2")
    assert code == EXIT_USAGE and "q" in err


def test_fit_flat_data_exits_not_converged(capsys, tmp_path):
    data = tmp_path / "flat"
    data.mkdir()
    t = np.arange(0, 1501, 60.0)
    (data / "f.csv").write_text("t_ns,signal\n" + "".join(f"{x},0.01\n" for x in t))
    (data / "f.json").write_text(json.dumps({"kind": "spin_resolved", "power_mW": 20.0,
                                             "isotope": "14n", "channel": 0}))
    code, _, err = run(capsys, "fit", data, "--starts", "2", "--out", tmp_path / "o")
    assert code == EXIT_NOT_CONVERGED and "identifiable" in err
    assert json.loads((tmp_path / "o" / "fit_report.json").read_text())["diagnostics"]["identifiable"] is False


def test_fit_nv_suite(capsys, tmp_path):
    data = tmp_path / "nv"
    assert run(capsys, "simulate", "suite", "--suite", "nv", "--preset", "nv", "--powers",
               "100,200,400,800", "--t-end", "5000", "--step", "50", "--out", data)[0] == 0
    (data / "truth.json").unlink()
    code, out, _ = run(capsys, "fit", data, "--preset", "nv", "--out", tmp_path / "o")
    assert code == EXIT_OK and "Gamma_s*" in out
    assert json.loads((tmp_path / "o" / "fit_report.json").read_text())["model"] == "nv_effective"
