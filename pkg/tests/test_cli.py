import csv
import json

import numpy as np
import pytest

from tedsim.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SIM, main, parse_trunc, ConfigError


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _sweep_file(tmp_path, name, values, axis2=None):
    doc = {"axis1": {"name": name, "values": values}}
    if axis2:
        doc["axis2"] = axis2
    p = tmp_path / f"sweep_{name}.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_parse_trunc():
    assert parse_trunc("d=3,c=3,w=4") == {"d": 3, "c": 3, "w": 4}
    assert parse_trunc(None) == {}
    for bad in ("x=3", "d3", "d=one", "w=1"):
        with pytest.raises(ConfigError):
            parse_trunc(bad)


def test_quantize_echoes_inputs(tmp_path):
    assert main(["quantize", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "quantize.json").read_text())
    assert doc["inputs"]["E_Jd_GHz"] == 8.7
    assert doc["derived"]["omega_d_GHz"] == pytest.approx(3.133, abs=1e-3)
    assert 4e-3 <= doc["purcell_T1_s"] <= 40e-3
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_status"] == 0 and man["outputs"] == ["quantize.json"]
    assert set(man["versions"]) == {"tedsim", "numpy", "scipy", "python"}
    assert man["wall_time_s"] >= 0


def test_missing_file_named_on_stderr(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["quantize", "--params", str(missing), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_invalid_configs(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["scatter", "--params", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    sw = _sweep_file(tmp_path, "colour", [1.0])
    assert main(["pitch-detect", "--sweep", sw, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["scatter", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["scatter", "--tol", "abc"]) == EXIT_CONFIG
    assert "unknown sweep parameter" in capsys.readouterr().err


def test_unwritable_output_is_io_failure(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["quantize", "--out", str(blocker / "sub")]) == EXIT_IO


def test_point_failure_exit_and_manifest(tmp_path, capsys):
    sw = _sweep_file(tmp_path, "n_bar", [0.0, 0.01])
    assert main(["scatter", "--sweep", sw, "--out", str(tmp_path)]) == EXIT_SIM
    rows = _rows(tmp_path / "scatter.csv")
    assert rows[0]["error"] and not rows[1]["error"]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_status"] == EXIT_SIM and len(man["failures"]) == 1
    assert "n_bar" in man["failures"][0]["error"]


def test_scatter_progress_and_quiet(tmp_path, capsys):
    sw = _sweep_file(tmp_path, "n_bar", [1e-3, 1 / 16, 10.0])
    assert main(["scatter", "--sweep", sw, "--out", str(tmp_path / "a")]) == EXIT_OK
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("[")]
    assert len(lines) == 3
    assert main(["scatter", "--sweep", sw, "--out", str(tmp_path / "b"), "--quiet"]) == EXIT_OK
    assert capsys.readouterr().err == ""
    r = [float(x["r_abs"]) for x in _rows(tmp_path / "a" / "scatter.csv")]
    assert r[1] < 0.05 < r[0]


def test_parallel_sweep_matches_serial(tmp_path):
    sw = _sweep_file(tmp_path, "n_bar", [1e-3, 0.03, 1.0],
                     axis2={"name": "delta_MHz", "values": [-1.0, 0.0, 1.0]})
    for jobs, sub in ((1, "s"), (3, "p")):
        assert main(["scatter", "--sweep", sw, "--jobs", str(jobs), "--quiet", "--out", str(tmp_path / sub)]) == 0
    assert (tmp_path / "s" / "scatter.csv").read_bytes() == (tmp_path / "p" / "scatter.csv").read_bytes()


def test_dispersion_csv_units(tmp_path):
    sw = _sweep_file(tmp_path, "phi_bar", [0.0, 0.5, 1.0])
    assert main(["dispersion", "--sweep", sw, "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "dispersion.csv")
    assert list(rows[0]) == ["phi_bar", "omega_d_GHz", "omega_c_GHz", "omega_w_GHz", "error"]
    assert float(rows[0]["omega_w_GHz"]) > float(rows[0]["omega_d_GHz"])


def test_emit_outputs_and_rerun(tmp_path):
    args = ["emit", "--trunc", "d=2,w=3", "--out", str(tmp_path / "a")]
    assert main(args) == EXIT_OK
    summary = json.loads((tmp_path / "a" / "emit_summary.json").read_text())
    assert summary["photon_probability"] == pytest.approx(summary["emitted"], abs=1e-6)
    assert summary["photon_probability"] > 0.99
    assert summary["invariants"]["positivity_ok"]
    spec = np.loadtxt(tmp_path / "a" / "emit_spectrum.csv", delimiter=",", skiprows=1)
    assert abs(spec[np.argmax(spec[:, 1]), 0]) < 2.0
    assert main(["rerun", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("emit_trajectory.csv", "emit_spectrum.csv", "emit_summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_detect_coherent_sweep(tmp_path):
    sw = _sweep_file(tmp_path, "n_bar", [1e-3, 0.1])
    assert main(["detect", "--sweep", sw, "--quiet", "--out", str(tmp_path)]) == EXIT_OK
    p = [float(r["p_detect"]) for r in _rows(tmp_path / "detect.csv")]
    assert p[0] < p[1]


def test_pitch_detect_resonance(tmp_path):
    sw = _sweep_file(tmp_path, "delta_omega_wm_MHz", [0.0, 3.0])
    assert main(["pitch-detect", "--trunc", "d=2,w=3", "--sweep", sw, "--quiet",
                 "--out", str(tmp_path)]) == EXIT_OK
    rows = _rows(tmp_path / "pitch_detect.csv")
    p = [float(r["p_detect"]) for r in rows]
    assert max(p) == p[0] and p[0] > 0.9
    assert all(r["invariants_ok"] == "true" for r in rows)
    side = json.loads((tmp_path / "pitch_detect.json").read_text())
    assert side["setup"]["network"]["dims_s"] == [2, 3]


def test_pitch_detect_with_protocol_file(tmp_path):
    from tedsim.protocols import pitch_detect_protocol
    proto = tmp_path / "proto.json"
    proto.write_text(json.dumps(pitch_detect_protocol(window=2e-6, readout=1e-6).to_json_dict()))
    assert main(["pitch-detect", "--trunc", "d=2,w=3", "--protocol", str(proto), "--quiet",
                 "--out", str(tmp_path)]) == EXIT_OK
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["resolved"]["protocol"]["segments"][-1]["duration_us"] == pytest.approx(1.0)
    assert man["inputs"]["protocol"]["path"] == str(proto)
