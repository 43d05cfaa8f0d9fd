import csv
import json
import math

import numpy as np
import pytest

from oneatomlaser import constants as C
from oneatomlaser import cli
from oneatomlaser.cli import ConfigError, build_config, main
from oneatomlaser.semiclassical import ConvergenceError


def run(tmp_path, *args):
    code = main([*args, "--out", str(tmp_path)])
    return code


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_defaults_are_cs(self, tmp_path):
        assert run(tmp_path, "q-scan", "--I3", "1") == 0
        meta = json.loads((tmp_path / "q-scan.json").read_text())
        p = meta["resolved_params_rad_per_us"]
        assert p["kappa"] == pytest.approx(C.mhz(4.2))
        assert p["gamma"] == pytest.approx(C.mhz(2.6))
        assert p["g43"] == pytest.approx(C.mhz(16.0))
        assert meta["version"]

    def test_yaml_and_flag_precedence(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("experiment: q-scan\nI3: [0.5, 1.0]\nI4: 2\nparams: {kappa: 8.4}\n")
        assert run(tmp_path, "q-scan", "--config", str(cfg), "--I4", "3") == 0
        meta = json.loads((tmp_path / "q-scan.json").read_text())
        assert meta["config"]["I4"] == 3.0
        assert meta["config"]["I3"] == [0.5, 1.0]
        assert meta["resolved_params_rad_per_us"]["kappa"] == pytest.approx(C.mhz(8.4))

    def test_grid_forms(self):
        cfg = build_config("rabi-scan", {"delta3": {"start": -2, "stop": 2, "step": 1}}, {"I3": "0:1:3"})
        assert cfg.delta3 == [-2.0, -1.0, 0.0, 1.0, 2.0]
        assert cfg.I3 == [0.0, 0.5, 1.0]

    @pytest.mark.parametrize("values,path", [({"n_traj": 0}, "n_traj"), ({"bogus": 1}, "bogus"),
                                             ({"I3": {"start": 0}}, "I3.stop"), ({"params": {"kappa": "x"}},
                                                                                 "params.kappa")])
    def test_errors_name_the_field(self, values, path):
        with pytest.raises(ConfigError) as err:
            build_config("q-scan", values, {})
        assert err.value.path == path

    @pytest.mark.parametrize("args", [["sc-scan", "--I3", "1,0.5"], ["q-scan", "--set", "bogus=1"],
                                      ["q-scan", "--I3=-1"], ["q-scan", "--f", "0"]])
    def test_config_error_exit(self, tmp_path, args, capsys):
        assert run(tmp_path, *args) == 2
        assert "config error" in capsys.readouterr().err

    def test_experiment_mismatch(self, tmp_path):
        cfg = tmp_path / "run.yaml"
        cfg.write_text("experiment: sc-scan\n")
        assert run(tmp_path, "q-scan", "--config", str(cfg)) == 2


class TestExperiments:
    def test_sc_scan_knee(self, tmp_path):
        assert run(tmp_path, "sc-scan") == 0
        summary = json.loads((tmp_path / "sc-scan.json").read_text())["summary"]["f=1"]
        assert summary["knee_1pct"] == pytest.approx(0.8, abs=0.15)
        rows = read_csv(tmp_path / "sc-scan.csv")
        assert len(rows) == 201 and all(r["status"] == "ok" for r in rows)

    def test_q_scan_purcell_antibunching(self, tmp_path):
        assert run(tmp_path, "q-scan", "--f", "0.0101", "--I3", "0.5:2:4") == 0
        rows = read_csv(tmp_path / "q-scan.csv")
        assert all(float(r["g2_0"]) < 1e-3 for r in rows)
        assert "sc_alpha2_over_n0f" not in rows[0]

    def test_failed_semiclassical_points_are_flagged(self, tmp_path, monkeypatch):
        def fail(p, **kw):
            raise ConvergenceError("no fixed point")
        monkeypatch.setattr(cli, "sc_steady", fail)
        assert run(tmp_path, "q-scan", "--I3", "0.5", "--semiclassical") == 0
        row = read_csv(tmp_path / "q-scan.csv")[0]
        assert row["status"] == "ok"
        assert math.isnan(float(row["sc_alpha2_over_n0f"]))
        assert row["sc_status"].startswith("ConvergenceError")

    def test_rabi_scan_maxima(self, tmp_path):
        assert run(tmp_path, "rabi-scan", "--I3", "0.1", "--delta3=-30:30:61") == 0
        rows = read_csv(tmp_path / "rabi-scan.csv")
        d = np.array([float(r["delta3_mhz"]) for r in rows])
        n = np.array([float(r["n_bar"]) for r in rows])
        top = d[np.argsort(n)[-2:]]
        np.testing.assert_allclose(np.sort(top), [-16.0, 16.0], atol=1.0)

    def test_byte_reproducible(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(out, "q-scan", "--I3", "0.5,3", "--f", "1,100") == 0
        assert (a / "q-scan.csv").read_bytes() == (b / "q-scan.csv").read_bytes()
        ja, jb = (json.loads((o / "q-scan.json").read_text()) for o in (a, b))
        for j in (ja, jb):
            j.pop("timestamp")
            j["config"].pop("out")
        assert ja == jb

    def test_full_precision(self, tmp_path):
        assert run(tmp_path, "q-scan", "--I3", "1") == 0
        row = read_csv(tmp_path / "q-scan.csv")[0]
        assert float(row["n_bar"]) == float(repr(float(row["n_bar"])))
        assert len(row["n_bar"].replace(".", "").lstrip("0").split("e")[0]) >= 15

    def test_solver_failure_exit(self, tmp_path, capsys):
        assert run(tmp_path, "g2", "--I3", "0", "--method", "regression") == 3
        assert "solver failure" in capsys.readouterr().err
        assert run(tmp_path, "spectrum", "--I3", "0", "--method", "regression") == 3
