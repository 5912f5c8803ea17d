import csv
import json
import math
import os

import numpy as np
import pytest

from orbsync import artifacts
from orbsync.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, EXIT_VALIDATION, main

from .conftest import rotor_config


def write_config(path, synthesis, scenario=None):
    doc = {"schema_version": 1, "synthesis": synthesis}
    if scenario is not None:
        doc["scenario"] = scenario
    path.write_text(json.dumps(doc))
    return str(path)


def single_scenario(**kw):
    sc = {"mode": "sliding_sync", "agents": [{"id": 0, "theta0": 0.0, "xi0": [0.05], "h0": 1.0}],
          "duration": 2.0, "dt": 0.002}
    sc.update(kw)
    return sc


@pytest.fixture(scope="module")
def rotor_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("rotor")
    cfg = write_config(d / "cfg.json", rotor_config(), single_scenario())
    code = main(["synthesize", "--config", cfg, "--out", str(d / "syn")])
    return d, cfg, code


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array(rows[1:], dtype=float)


def rewrite_grids(syn, fn):
    header, data = read_csv(syn / "grids.csv")
    header, data = fn(header, data)
    artifacts.write_table(syn / "grids.csv", header, data)


class TestSynthesize:
    def test_rotor(self, rotor_run):
        d, _, code = rotor_run
        assert code == EXIT_OK
        report = json.loads((d / "syn" / "report.json").read_text())
        assert report["checks"]["floquet"]["value"] == pytest.approx(math.exp(-2), abs=1e-6)
        manifest = json.loads((d / "syn" / "manifest.json").read_text())
        assert manifest["checks"]["floquet"] is True
        for name, digest in manifest["outputs"].items():
            assert artifacts.file_hash(d / "syn" / name) == digest

    def test_uncontrollable_variant(self, tmp_path):
        syn = rotor_config(plant={"id": "rotor", "params": {"omega": math.pi, "gravity_coeff": 0.0,
                                                            "input_gain": 0.0}})
        syn.pop("sliding")
        syn.pop("augmented_lqr")
        code = main(["synthesize", "--config", write_config(tmp_path / "c.json", syn), "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["checks"]["gramian"]["value"] == 0.0
        assert report["checks"]["gramian"]["passed"] is False

    def test_three_dimensional_weights_echoed(self, tmp_path):
        syn = {"plant": {"id": "rotor_oscillator"}, "reference": {"kind": "analytic"},
               "chart": {"strategy": "monotone"}, "grid_N": 512,
               "lqr": {"Q": [20.0, 1.0, 1.0], "R": [[2e4]]},
               "tolerances": {"max_periods": 400}}
        code = main(["synthesize", "--config", write_config(tmp_path / "c.json", syn), "--out", str(tmp_path / "o")])
        assert code == EXIT_OK
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        np.testing.assert_array_equal(manifest["weights"]["Q"], np.diag([20.0, 1.0, 1.0]))
        assert manifest["weights"]["R"] == [[2e4]]

    @pytest.mark.parametrize("doc", ["{not json", json.dumps({"synthesis": {}}),
                                     json.dumps({"schema_version": 2, "synthesis": rotor_config()}),
                                     json.dumps({"schema_version": 1,
                                                 "synthesis": rotor_config(plant={"id": "quadrotor"})})])
    def test_bad_config(self, tmp_path, doc):
        (tmp_path / "c.json").write_text(doc)
        assert main(["synthesize", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG

    def test_usage_error(self):
        assert main(["synthesize"]) == EXIT_CONFIG
        assert main(["bogus"]) == EXIT_CONFIG


class TestSimulate:
    def test_completes(self, rotor_run, tmp_path):
        d, cfg, _ = rotor_run
        assert main(["simulate", "--config", cfg, "--synthesis", str(d / "syn"), "--out", str(tmp_path)]) == EXIT_OK
        header, data = read_csv(tmp_path / "trace.csv")
        assert header[:3] == ["t", "agent", "theta"]
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["status"] == "completed"
        assert manifest["outputs"]["trace.csv"] == artifacts.file_hash(tmp_path / "trace.csv")

    def test_same_config_same_trace_hash(self, rotor_run, tmp_path):
        d, cfg, _ = rotor_run
        for sub in ("a", "b"):
            main(["simulate", "--config", cfg, "--synthesis", str(d / "syn"), "--out", str(tmp_path / sub)])
        ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["outputs"]
        hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["outputs"]
        assert ha == hb

    def test_corrupted_synthesis(self, rotor_run, tmp_path, capsys):
        d, cfg, _ = rotor_run
        bad = tmp_path / "syn"
        bad.mkdir()
        for f in (d / "syn").iterdir():
            (bad / f.name).write_bytes(f.read_bytes())
        (bad / "synthesis.json").write_text('{"config": ')
        assert main(["simulate", "--config", cfg, "--synthesis", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "synthesis.json" in capsys.readouterr().err

    def test_hash_mismatch(self, rotor_run, tmp_path):
        d, _, _ = rotor_run
        other = write_config(tmp_path / "c.json", rotor_config(grid_N=1024), single_scenario())
        assert main(["simulate", "--config", other, "--synthesis", str(d / "syn"), "--out", str(tmp_path / "o")]) \
            == EXIT_CONFIG

    def test_divergence(self, rotor_run, tmp_path):
        d, _, _ = rotor_run
        cfg = write_config(tmp_path / "c.json", rotor_config(), single_scenario(k=1.0, duration=2.0))
        code = main(["simulate", "--config", cfg, "--synthesis", str(d / "syn"), "--out", str(tmp_path / "o")])
        assert code == EXIT_DIVERGED
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["status"] == "diverged" and "agent 0" in manifest["error"]
        assert not (tmp_path / "o" / "trace.csv").exists()

    def test_unknown_scenario_key(self, rotor_run, tmp_path):
        d, _, _ = rotor_run
        cfg = write_config(tmp_path / "c.json", rotor_config(), single_scenario(warp=9))
        assert main(["simulate", "--config", cfg, "--synthesis", str(d / "syn"), "--out", str(tmp_path / "o")]) \
            == EXIT_CONFIG


class TestCheck:
    def copy_syn(self, rotor_run, tmp_path):
        d, _, _ = rotor_run
        dst = tmp_path / "syn"
        dst.mkdir()
        for f in (d / "syn").iterdir():
            (dst / f.name).write_bytes(f.read_bytes())
        return dst

    def test_fresh(self, rotor_run, tmp_path):
        d, _, _ = rotor_run
        assert main(["check", "--synthesis", str(d / "syn"), "--out", str(tmp_path)]) == EXIT_OK
        assert json.loads((tmp_path / "check.json").read_text())["warnings"] == []

    def test_zeroed_adjoint(self, rotor_run, tmp_path):
        syn = self.copy_syn(rotor_run, tmp_path)

        def zero_n(header, data):
            for j, name in enumerate(header):
                if name.startswith("n_"):
                    data[:, j] = 0.0
            return header, data

        rewrite_grids(syn, zero_n)
        assert main(["check", "--synthesis", str(syn), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
        checks = json.loads((tmp_path / "o" / "check.json").read_text())["checks"]
        assert checks["adjoint_residual"]["passed"] is False

    def test_downsampled_grids(self, rotor_run, tmp_path, capsys):
        syn = self.copy_syn(rotor_run, tmp_path)
        rewrite_grids(syn, lambda h, d: (h, d[::2]))
        assert main(["check", "--synthesis", str(syn), "--out", str(tmp_path / "o")]) == EXIT_OK
        out = json.loads((tmp_path / "o" / "check.json").read_text())
        assert out["warnings"]
        assert out["checks"]["grid_drift"]["value"] <= 1e-4
        assert "warning" in capsys.readouterr().err

    def test_missing_artifacts(self, tmp_path):
        assert main(["check", "--synthesis", str(tmp_path / "nothing")]) == EXIT_CONFIG


class TestAtomicWrites:
    def test_interrupted_write_leaves_nothing(self, tmp_path, monkeypatch):
        target = tmp_path / "x.json"

        def boom(src, dst):
            raise KeyboardInterrupt

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(KeyboardInterrupt):
            artifacts.write_json(target, {"a": 1})
        assert list(tmp_path.iterdir()) == []

    def test_overwrite_is_all_or_nothing(self, tmp_path, monkeypatch):
        target = tmp_path / "x.json"
        artifacts.write_json(target, {"a": 1})
        monkeypatch.setattr(os, "replace", lambda s, d: (_ for _ in ()).throw(OSError("disk")))
        with pytest.raises(OSError):
            artifacts.write_json(target, {"a": 2})
        assert json.loads(target.read_text()) == {"a": 1}
        assert [p.name for p in tmp_path.iterdir()] == ["x.json"]
