import json
import subprocess
import sys
from pathlib import Path

import pytest

from cle_ekf.cli import build_parser, main
from cle_ekf.crn import Reaction, SpeciesValue, build_crn, crn_to_dict
from cle_ekf.harness import EXAMPLE_STABILITY

DATA = Path(__file__).resolve().parent.parent / "data"


def write(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestStability:
    def test_reproduces_delta_max(self, tmp_path, capsys):
        assert run_cli("stability", "--params", DATA / "stability.json", "--out", tmp_path) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["delta_max"] == pytest.approx(5.42e-4, rel=0.01)
        assert json.loads((tmp_path / "stability.json").read_text()) == doc

    def test_not_contractive_exits_2(self, tmp_path, capsys):
        params = write(tmp_path / "p.json", {**EXAMPLE_STABILITY, "L_f": 1.2})
        assert run_cli("stability", "--params", params) == 2
        assert "drift not contractive" in capsys.readouterr().err

    def test_missing_field_exits_1(self, tmp_path, capsys):
        doc = dict(EXAMPLE_STABILITY)
        del doc["m1"]
        assert run_cli("stability", "--params", write(tmp_path / "p.json", doc)) == 1
        assert "m1" in capsys.readouterr().err

    def test_estimated_fields(self, capsys):
        code = run_cli("stability", "--params", DATA / "stability_estimate.json",
                       "--model", DATA / "gene_expression.json")
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["estimated_fields"] == ["L_a", "C_A", "v_bound"]
        assert doc["inputs"]["v_bound"] == pytest.approx(2.7657, abs=5e-4)

    def test_missing_file(self, tmp_path, capsys):
        assert run_cli("stability", "--params", tmp_path / "nope.json") == 1


class TestSimulateAndFilter:
    def test_steps_zero_exits_1(self, tmp_path):
        assert run_cli("simulate", "--model", DATA / "gene_expression.json", "--config", DATA / "simulate.json",
                       "--steps", 0, "--out", tmp_path) == 1

    def test_divergence_exits_3(self, tmp_path, capsys):
        crn = build_crn(["x"], [(Reaction(1e3, (SpeciesValue(0),)), {"x": 1})])
        model = write(tmp_path / "m.json", crn_to_dict(crn))
        config = write(tmp_path / "c.json", {"x0": [1.0], "delta": 1.0, "steps": 500})
        assert run_cli("simulate", "--model", model, "--config", config, "--out", tmp_path / "o") == 3
        assert "step" in capsys.readouterr().err

    def test_pipeline(self, tmp_path):
        sim_out = tmp_path / "sim"
        assert run_cli("simulate", "--model", DATA / "gene_expression.json", "--config", DATA / "simulate.json",
                       "--steps", 400, "--out", sim_out, "--plot") == 0
        traj = (sim_out / "trajectory.csv").read_text().splitlines()
        assert traj[0] == "t,P_o,T,R_i,X" and len(traj) == 402
        assert (sim_out / "measurements.csv").read_text().splitlines()[0] == "t,y1,y2"
        assert (sim_out / "trajectory.svg").exists()

        filter_cfg = json.loads((DATA / "filter.json").read_text())
        filter_cfg["measurements"] = str(sim_out / "measurements.csv")
        cfg = write(tmp_path / "filter.json", filter_cfg)
        out = tmp_path / "filt"
        assert run_cli("filter", "--model", DATA / "gene_expression.json", "--config", cfg, "--out", out,
                       "--plot") == 0
        lines = (out / "filter.csv").read_text().splitlines()
        assert lines[0] == "k,t,xhat_1,xhat_2,xhat_3,xhat_4,trace_P,norm_P,norm_Q,innov_1,innov_2"
        assert len(lines) == 401
        assert lines[1].startswith("1,")
        assert (out / "records.bin").exists() and (out / "filter.svg").exists()

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        config = json.loads((DATA / "simulate.json").read_text())
        del config["seed"]
        cfg = write(tmp_path / "c.json", config)
        args = ["simulate", "--model", DATA / "gene_expression.json", "--config", cfg, "--steps", 50]
        monkeypatch.setenv("CLE_EKF_SEED", "5")
        run_cli(*args, "--out", tmp_path / "env")
        monkeypatch.delenv("CLE_EKF_SEED")
        run_cli(*args, "--seed", 5, "--out", tmp_path / "flag")
        run_cli(*args, "--out", tmp_path / "default")
        env = (tmp_path / "env" / "trajectory.csv").read_bytes()
        assert env == (tmp_path / "flag" / "trajectory.csv").read_bytes()
        assert env != (tmp_path / "default" / "trajectory.csv").read_bytes()

    def test_missing_required_flag(self, tmp_path):
        assert run_cli("filter", "--model", DATA / "gene_expression.json", "--out", tmp_path) == 1


class TestExperiment:
    def _run(self, out, *extra):
        return run_cli("experiment", "--config", DATA / "experiment.json", "--runs", 1, "--horizon", 0.25,
                       "--seed", 11, "--out", out, "--plot", *extra)

    def test_byte_identical_reruns(self, tmp_path):
        assert self._run(tmp_path / "a") == 0
        assert self._run(tmp_path / "b") == 0
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert {"mse_norm.csv", "p_norm.csv", "q_norm.csv", "summary.json", "mse_norm.svg"} <= set(names)
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_bad_config_exits_1(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"runs": 0})
        assert run_cli("experiment", "--config", cfg, "--out", tmp_path) == 1
        assert "runs" in capsys.readouterr().err


class TestParser:
    FLAGS = {"--model", "--params", "--config", "--delta", "--steps", "--runs", "--horizon", "--seed", "--out",
             "--plot", "--jobs"}

    def test_help_lists_every_flag(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command")
        seen = set()
        for name, p in sub.choices.items():
            text = p.format_help()
            flags = {s for a in p._actions for s in a.option_strings if s.startswith("--") and s != "--help"}
            for flag in flags:
                assert flag in text, (name, flag)
            seen |= flags
        assert seen == self.FLAGS

    def test_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "cle_ekf.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("validate", "simulate", "filter", "stability", "experiment"):
            assert command in proc.stdout

    def test_usage_error_exits_1(self):
        with pytest.raises(SystemExit) as info:
            main(["stability", "--bogus"])
        assert info.value.code == 1

    def test_validate(self, capsys):
        assert run_cli("validate", "--model", DATA / "gene_expression.json") == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["reactions"] == 8
        assert doc["stoichiometry_norm"] == pytest.approx(2.7657, abs=5e-4)
