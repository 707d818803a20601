import json

import numpy as np
import pytest
import yaml

from compww.cli import (EXIT_FAILED, EXIT_OK, ConfigError, build_report, config_from_dict, load_config, main)
from compww.energy import read_time_series
from compww.evolve import observed_time

SMALL = {"grid": {"n_horizontal": 32, "n_vertical": 16}}


def _config(tmp_path, extra=None, name="exp.yaml"):
    cfg = json.loads(json.dumps(SMALL))
    for key, val in (extra or {}).items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_probe_flat_strip(tmp_path):
    cfg = _config(tmp_path, {"probe": {"samples": 5, "kinds": ["poincare", "trace"]}})
    out = tmp_path / "probe"
    assert main(["probe", "-c", cfg, "-o", str(out)]) == EXIT_OK
    rep = json.loads((out / "probe_poincare.json").read_text())
    assert rep["kind"] == "poincare" and rep["passed"]
    assert (out / "config.yaml").is_file()


def test_make_data_zero_velocity(tmp_path):
    cfg = _config(tmp_path, {"initial": {"preset": "hydrostatic"}})
    out = tmp_path / "data"
    assert main(["make-data", "-c", cfg, "-o", str(out)]) == EXIT_OK
    comp = json.loads((out / "compatibility.json").read_text())
    assert comp["passed"] and comp["iterations"] == 2
    assert max(comp["boundary"]) == 0.0
    assert (out / "data" / "trace.csv").is_file()


def test_evolve_deterministic_and_report(tmp_path):
    cfg = _config(tmp_path, {"initial": {"preset": "swirl"},
                             "stepper": {"T_final": 0.02, "sample_every": 0.005}})
    a, b = tmp_path / "runs" / "a", tmp_path / "runs" / "b"
    assert main(["evolve", "-c", cfg, "-o", str(a)]) == EXIT_OK
    assert main(["evolve", "-c", cfg, "-o", str(b)]) == EXIT_OK
    assert (a / "timeseries.csv").read_bytes() == (b / "timeseries.csv").read_bytes()
    # the report recomputes E-ratio and T_obs from the CSV
    header, data = read_time_series(a / "timeseries.csv")
    E = data[:, header.index("E2*")]
    rep = build_report(tmp_path / "runs")
    entry = next(e for e in rep["entries"] if e["dir"] == str(a))
    assert entry["E_ratio_max"] == pytest.approx(np.max(E / E[0]), rel=1e-14)
    assert entry["T_obs"] == observed_time(data[:, 0], E, data[:, header.index("eps")])
    summary = json.loads((a / "summary.json").read_text())
    assert summary["T_obs"] == pytest.approx(entry["T_obs"])
    assert main(["report", str(tmp_path / "runs")]) == EXIT_OK
    assert (tmp_path / "runs" / "report.txt").is_file()


def test_sweep_and_verdict(tmp_path):
    cfg = _config(tmp_path, {"sweep": {"kappas": [100.0, 1000.0], "T": 0.01, "monitor": False}})
    out = tmp_path / "res" / "sweep"
    assert main(["sweep-kappa", "-c", cfg, "-o", str(out)]) == EXIT_OK
    summary = json.loads((out / "sweep.json").read_text())
    dv = [r["final_diff_v"] for r in summary["runs"]]
    rep = build_report(tmp_path / "res")
    entry = rep["entries"][0]
    assert entry["kind"] == "sweep"
    assert entry["monotone_v"] == (dv[1] < dv[0]) == summary["monotone_v"]


def test_report_empty(tmp_path, capsys):
    assert build_report(tmp_path)["status"] == "no results"
    assert main(["report", str(tmp_path)]) == EXIT_OK
    assert "no results" in capsys.readouterr().out


def test_verify_commutators(tmp_path):
    cfg = _config(tmp_path, {"commutators": {"max_order": 1, "structure_order": 3}})
    out = tmp_path / "comm"
    assert main(["verify-commutators", "-c", cfg, "-o", str(out)]) == EXIT_OK
    assert json.loads((out / "commutators.json").read_text())["passed"]


@pytest.mark.parametrize("bad", [
    {"grid": {"n_horizontal": 7}},
    {"eos": {"kind": "polytrope"}},
    {"r": 9},
    {"mu": 1.0},
    {"initial": {"preset": "vortex"}},
    {"grid": {"depth": "deep"}},
    {"nonsense": 1},
])
def test_bad_config_exit_code(tmp_path, bad):
    cfg = _config(tmp_path, bad)
    assert main(["probe", "-c", cfg, "-o", str(tmp_path / "o")]) == EXIT_FAILED


def test_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    assert main(["probe", "-c", str(tmp_path / "absent.yaml")]) == EXIT_FAILED


def test_resolved_config_roundtrip(tmp_path):
    cfg = config_from_dict({"eos": {"kappa": 1000}, "sweep": {"kappas": [10, 100]}})
    cfg.dump(tmp_path / "c.yaml")
    again = load_config(tmp_path / "c.yaml")
    assert again == cfg and again.eos.kappa == 1000.0


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("COMPWW_OUTPUT_ROOT", str(tmp_path / "root"))
    cfg = _config(tmp_path, {"probe": {"samples": 2, "kinds": ["poincare"]}})
    assert main(["probe", "-c", cfg]) == EXIT_OK
    assert (tmp_path / "root" / "probe" / "probe_poincare.json").is_file()
