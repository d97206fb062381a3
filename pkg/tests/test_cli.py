import csv
import hashlib
import json

import pytest
from click.testing import CliRunner

from cellplan.cli import MAP_COLUMNS, OUT_DIR_ENV, main
from cellplan.instance import GeneratorConfig, dumps_instance, generate_instance, loads_instance

from helpers import tiny_config

FAST = ["--max-iterations", "3"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(dumps_instance(generate_instance(tiny_config(4), 4)))
    return path


@pytest.fixture
def small_file(tmp_path, runner):
    path = tmp_path / "small.json"
    res = runner.invoke(main, ["generate", "--users", "40", "--small-sites", "6", "--seed", "1",
                               "--out", str(path)])
    assert res.exit_code == 0, res.output
    return path


def fast_config(tmp_path, **solver):
    cfg = {"solver": {"max_iterations": 3, "tabu": {"max_outer": 2, "max_inner": 5}, **solver}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


class TestGenerate:
    def test_stdout_deterministic(self, runner):
        args = ["generate", "--users", "20", "--small-sites", "3", "--seed", "5"]
        a, b = runner.invoke(main, args), runner.invoke(main, args)
        assert a.exit_code == 0 and a.output == b.output
        assert loads_instance(a.output).n_users == 20

    def test_table1_preset(self, runner):
        res = runner.invoke(main, ["generate", "--preset", "table1", "--users", "700",
                                   "--small-sites", "120", "--seed", "42"])
        inst = loads_instance(res.output)
        assert inst.n_users == 700 and len(inst.small_sites) == 120 and len(inst.macro_sites) == 4
        assert inst.bias_w == 0.2

    def test_zero_users_is_bad_input(self, runner):
        res = runner.invoke(main, ["generate", "--users", "0"])
        assert res.exit_code == 3

    def test_config_file(self, runner, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"seed": 9, "generator": {"n_users": 7, "n_small_sites": 2}}))
        res = runner.invoke(main, ["generate", "--config", str(cfg)])
        assert res.exit_code == 0
        assert loads_instance(res.output) == generate_instance(
            GeneratorConfig(n_users=7, n_small_sites=2), 9)

    def test_bad_config(self, runner, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"generator": {"bogus": 1}}))
        assert runner.invoke(main, ["generate", "--config", str(cfg)]).exit_code == 3


class TestSolve:
    def test_run_directory(self, runner, small_file, tmp_path):
        out = tmp_path / "run"
        res = runner.invoke(main, ["solve", str(small_file), *FAST, "--out-dir", str(out)])
        assert res.exit_code == 0, res.output
        assert {p.name for p in out.iterdir()} == {
            "result.json", "config.json", "bounds.csv", "iterations.csv", "tabu.csv",
            "deployment_map.csv",
        }
        result = json.loads((out / "result.json").read_text())
        assert "gap" in result["summary"]
        assert {"small_cells_opened", "macros_upgraded"} <= set(result["summary"])
        config = json.loads((out / "config.json").read_text())
        digest = hashlib.sha256(small_file.read_bytes()).hexdigest()
        assert config["inputs"]["instance"]["sha256"] == digest
        assert config["resolved"]["solver"]["max_iterations"] == 3
        with (out / "deployment_map.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == MAP_COLUMNS
        assert sum(r["record"] == "site" for r in rows) == 10
        assert sum(r["record"] == "user" for r in rows) == 40

    def test_stdin_and_env_dir(self, runner, small_file, tmp_path, monkeypatch):
        out = tmp_path / "from_env"
        monkeypatch.setenv(OUT_DIR_ENV, str(out))
        res = runner.invoke(main, ["solve", "-", *FAST], input=small_file.read_text())
        assert res.exit_code == 0, res.output
        assert (out / "result.json").exists()
        assert json.loads(res.output)["run_dir"] == str(out)

    def test_single_level(self, runner, small_file, tmp_path):
        out = tmp_path / "single"
        res = runner.invoke(main, ["solve", str(small_file), *FAST, "--single-level",
                                   "--out-dir", str(out)])
        assert res.exit_code == 0
        with (out / "tabu.csv").open() as fh:
            levels = {r["level"] for r in csv.DictReader(fh)}
        assert levels == {"small"}
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["resolved"]["solver"]["tabu"]["single_level"] is True

    def test_config_recorded(self, runner, small_file, tmp_path):
        cfg = fast_config(tmp_path, epsilon=0.05)
        out = tmp_path / "cfgrun"
        res = runner.invoke(main, ["solve", str(small_file), "--config", str(cfg), "--out-dir", str(out)])
        assert res.exit_code == 0
        rec = json.loads((out / "config.json").read_text())
        assert rec["resolved"]["solver"]["epsilon"] == 0.05
        assert rec["inputs"]["config"]["sha256"] == hashlib.sha256(cfg.read_bytes()).hexdigest()

    def test_deterministic_outputs(self, runner, small_file, tmp_path):
        dirs = []
        for name in ("a", "b"):
            out = tmp_path / name
            runner.invoke(main, ["solve", str(small_file), *FAST, "--seed", "3", "--out-dir", str(out)])
            dirs.append(out)
        for name in ("result.json", "bounds.csv", "iterations.csv", "tabu.csv", "deployment_map.csv"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

    def test_bad_instance(self, runner, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema": "cellplan.instance", "schema_version": 1}')
        res = runner.invoke(main, ["solve", str(bad)])
        assert res.exit_code == 3
        assert runner.invoke(main, ["solve", str(tmp_path / "missing.json")]).exit_code == 3

    def test_threads_flag(self, runner, small_file, tmp_path):
        res = runner.invoke(main, ["solve", str(small_file), *FAST, "--threads", "1",
                                   "--out-dir", str(tmp_path / "t")])
        assert res.exit_code == 0
        assert runner.invoke(main, ["solve", str(small_file), "--threads", "0"]).exit_code == 3


class TestVerify:
    def _solve(self, runner, path, tmp_path):
        out = tmp_path / "v"
        runner.invoke(main, ["solve", str(path), *FAST, "--out-dir", str(out)])
        return out / "result.json"

    def test_solve_then_verify(self, runner, small_file, tmp_path):
        sol = self._solve(runner, small_file, tmp_path)
        res = runner.invoke(main, ["verify", str(small_file), str(sol)])
        assert res.exit_code == 0
        assert json.loads(res.output)["violations"] == []

    def test_closed_facility_serving(self, runner, small_file, tmp_path):
        sol = self._solve(runner, small_file, tmp_path)
        d = json.loads(sol.read_text())
        # point the first user at the massive type of a macro site running conventional
        conv_site = next(i for i in range(4) if d["deployment"][i] == 0)
        d["serving"][0] = [conv_site, 1]
        sol.write_text(json.dumps(d))
        res = runner.invoke(main, ["verify", str(small_file), str(sol)])
        assert res.exit_code == 1
        kinds = [v["constraint"] for v in json.loads(res.output)["violations"]]
        assert "serve_open_only" in kinds

    def test_objective_mismatch(self, runner, small_file, tmp_path):
        sol = self._solve(runner, small_file, tmp_path)
        d = json.loads(sol.read_text())
        d["objective"] *= 1 + 1e-6
        sol.write_text(json.dumps(d))
        res = runner.invoke(main, ["verify", str(small_file), str(sol)])
        assert res.exit_code == 1
        assert [v["constraint"] for v in json.loads(res.output)["violations"]] == ["objective_mismatch"]

    def test_malformed_solution(self, runner, small_file, tmp_path):
        bad = tmp_path / "sol.json"
        bad.write_text("{}")
        assert runner.invoke(main, ["verify", str(small_file), str(bad)]).exit_code == 3


class TestOracle:
    def test_within_limits_and_verify(self, runner, tiny_file, tmp_path):
        out = tmp_path / "oracle.json"
        res = runner.invoke(main, ["oracle", str(tiny_file), "--out", str(out)])
        assert res.exit_code == 0
        d = json.loads(out.read_text())
        assert {"optimum", "optimal_y", "optimal_x", "enumerated_count"} <= set(d)
        assert runner.invoke(main, ["verify", str(tiny_file), str(out)]).exit_code == 0

    def test_refusal(self, runner, small_file):
        res = runner.invoke(main, ["oracle", str(small_file)])
        assert res.exit_code == 2
        assert json.loads(res.output)["users"] == 40

    def test_compare(self, runner, tiny_file, tmp_path):
        cfg = fast_config(tmp_path)
        res = runner.invoke(main, ["oracle", str(tiny_file), "--compare", "--config", str(cfg)])
        assert res.exit_code == 0
        cmp = json.loads(res.output)["compare"]
        assert cmp["sandwich"] is True
