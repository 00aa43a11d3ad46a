import csv
import json

import numpy as np
import pytest

from branchrl import cli
from branchrl.engine import Limits
from branchrl.instances import MilpInstance, read_instance, write_instance
from branchrl.qnet import init_params, save_params
from branchrl.trainer import TrainerConfig
from oracles import step_integral

SMALL = {"n_rows": 10, "n_cols": 12, "density": 0.4, "cost_max": 1}


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


@pytest.fixture
def inst_dir(tmp_path):
    d = tmp_path / "insts"
    cli.cmd_generate("set_cover", SMALL, 4, 7, d)
    return d


class TestGenerate:
    def test_files_and_manifest(self, inst_dir):
        names = sorted(p.name for p in inst_dir.iterdir())
        assert names == ["manifest.json"] + [f"set_cover_{k:06d}.milp" for k in range(7, 11)]
        m = manifest(inst_dir)
        assert m["command"] == "generate" and m["seed"] == 7
        assert sorted(m["artifacts"]) == m["artifacts"]

    def test_deterministic(self, inst_dir, tmp_path):
        other = tmp_path / "again"
        cli.cmd_generate("set_cover", SMALL, 4, 7, other)
        for p in inst_dir.glob("*.milp"):
            assert (other / p.name).read_bytes() == p.read_bytes()

    def test_files_parse(self, inst_dir):
        for p in inst_dir.glob("*.milp"):
            text = p.read_text()
            assert write_instance(read_instance(text)) == text

    def test_main_entry(self, tmp_path, capsys):
        assert cli.main(["generate", "--family", "knapsack", "--n-items", "6", "--count", "2",
                         "--seed", "3", "--out", str(tmp_path / "k")]) == 0
        assert len(list((tmp_path / "k").glob("*.milp"))) == 2


class TestSolve:
    def test_integral_relaxation_single_node(self, tmp_path):
        inst = MilpInstance.from_dense([1.0], [[-1.0]], [-1.0], [0], [1], [True])
        (tmp_path / "i.milp").write_text(write_instance(inst))
        for policy in ("sb", "pc", "mostinf", "random"):
            assert cli.cmd_solve(tmp_path / "i.milp", policy, Limits()).node_count == 1

    def test_policies_agree_on_optimum(self, inst_dir):
        path = sorted(inst_dir.glob("*.milp"))[0]
        a = cli.cmd_solve(path, "sb", Limits())
        b = cli.cmd_solve(path, "random", Limits())
        assert a.primal_value == pytest.approx(b.primal_value, abs=1e-6)

    def test_csv_reintegrates(self, inst_dir, tmp_path):
        path = sorted(inst_dir.glob("*.milp"))[1]
        out = tmp_path / "solve"
        report = cli.cmd_solve(path, "pc", Limits(max_work=100), out_dir=out)
        data = json.loads((out / "report.json").read_text())
        with open(out / "trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["work_time", "dual_bound"]
        trace = [(float(t), float(z)) for t, z in rows[1:]]
        assert step_integral(trace, data["horizon"], data["root_bound"]) == pytest.approx(
            data["dual_integral"], abs=1e-9)
        assert data["dual_integral"] == report.dual_integral
        assert manifest(out)["command"] == "solve"

    def test_learned_policy(self, inst_dir, tmp_path):
        save_params(tmp_path / "theta.npz", init_params(0, width=8))
        path = sorted(inst_dir.glob("*.milp"))[0]
        report = cli.cmd_solve(path, f"learned:{tmp_path / 'theta.npz'}", Limits(max_work=100))
        assert report.status in ("optimal", "limit")

    def test_missing_checkpoint(self, inst_dir, tmp_path, capsys):
        path = sorted(inst_dir.glob("*.milp"))[0]
        code = cli.main(["solve", str(path), "--policy", f"learned:{tmp_path / 'none.npz'}"])
        assert code == 2
        assert "none.npz" in capsys.readouterr().err

    def test_bad_checkpoint_shape(self, inst_dir, tmp_path, capsys):
        p = init_params(0, width=8)
        p["hd_b2"] = np.zeros(3)
        save_params(tmp_path / "bad.npz", p)
        path = sorted(inst_dir.glob("*.milp"))[0]
        assert cli.main(["solve", str(path), "--policy", f"learned:{tmp_path / 'bad.npz'}"]) == 2
        assert "hd_b2" in capsys.readouterr().err

    def test_unknown_policy(self, inst_dir, capsys):
        path = sorted(inst_dir.glob("*.milp"))[0]
        assert cli.main(["solve", str(path), "--policy", "magic"]) == 2
        assert "magic" in capsys.readouterr().err

    def test_missing_instance(self, tmp_path, capsys):
        assert cli.main(["solve", str(tmp_path / "nope.milp")]) == 2
        assert "nope.milp" in capsys.readouterr().err

    def test_reproducible_from_manifest(self, inst_dir, tmp_path):
        path = sorted(inst_dir.glob("*.milp"))[2]
        cli.cmd_solve(path, "random", Limits(max_work=80), seed=5, out_dir=tmp_path / "a")
        m = manifest(tmp_path / "a")
        cfg = m["config"]
        cli.cmd_solve(cfg["instance"], cfg["policy"], Limits(cfg["limits_work"]), seed=m["seed"],
                      out_dir=tmp_path / "b")
        for name in ("report.json", "trace.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestEvaluate:
    def test_wins_sum_to_instance_count(self, inst_dir):
        table = cli.cmd_evaluate(["pc", "random", "mostinf"], inst_dir, Limits(max_work=100))
        wins = [row["wins"] for row in table["policies"].values()]
        assert sum(wins) == pytest.approx(4)

    def test_single_policy_wins_all(self, inst_dir):
        table = cli.cmd_evaluate(["pc"], inst_dir, Limits(max_work=100))
        assert table["policies"]["pc"]["wins"] == 4

    def test_identical_policies_split(self, inst_dir):
        table = cli.cmd_evaluate(["pc", "pc"], inst_dir, Limits(max_work=100))
        assert {k: v["wins"] for k, v in table["policies"].items()} == {"pc#0": 2.0, "pc#1": 2.0}

    def test_win_counts_tie_rule(self):
        wins = cli.win_counts({"a": [1.0, 2.0, 3.0], "b": [1.0, 5.0, 0.0], "c": [0.0, 5.0, 3.0]})
        assert wins == pytest.approx({"a": 0.5 + 0.5, "b": 0.5 + 0.5, "c": 0.5 + 0.5})

    def test_outputs_and_determinism(self, inst_dir, tmp_path):
        cli.cmd_evaluate(["random", "pc"], inst_dir, Limits(max_work=100), seed=1,
                         out_dir=tmp_path / "a")
        cli.cmd_evaluate(["random", "pc"], inst_dir, Limits(max_work=100), seed=1,
                         out_dir=tmp_path / "b")
        for name in ("scores.json", "scores.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        header = (tmp_path / "a" / "scores.csv").read_text().splitlines()[0]
        assert header == "instance,random,pc"

    def test_empty_directory(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert cli.main(["evaluate", str(tmp_path / "empty")]) == 2
        assert "empty" in capsys.readouterr().err

    def test_main_prints_table(self, inst_dir, capsys):
        assert cli.main(["evaluate", str(inst_dir), "--policies", "pc,random",
                         "--limits-work", "100"]) == 0
        out = capsys.readouterr().out
        assert "mean score" in out and "/4" in out


class TestTrainCommands:
    def test_collect_then_train(self, tmp_path):
        cfg = TrainerConfig(total_steps=10, demo_size=15, batch_size=4, width=8, tau_target=3,
                            tau_superior=5, max_work=100.0, family_params=SMALL, eval_size=2)
        demos = cli.cmd_collect_demo(cfg, tmp_path / "demo")
        assert demos.name == "demos.npz"
        report = cli.cmd_train(cfg, tmp_path / "train", demos)
        names = sorted(p.name for p in (tmp_path / "train").iterdir())
        assert names == ["config.json", "eval_curve.csv", "manifest.json", "theta.npz",
                         "theta_superior.npz", "train_report.json"]
        back = TrainerConfig.from_json((tmp_path / "train" / "config.json").read_text())
        assert back == cfg
        assert (tmp_path / "train" / "eval_curve.csv").read_text() == report.eval_curve_csv()

    def test_main_with_config_file(self, tmp_path, capsys):
        cfg = {"total_steps": 5, "demo_size": 10, "batch_size": 2, "width": 8,
               "tau_superior": 5, "family_params": SMALL, "eval_size": 1, "max_work": 80}
        (tmp_path / "c.json").write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--seed", "3",
                         "--out", str(tmp_path / "t")]) == 0
        assert capsys.readouterr().out.startswith("step,G\n5,")
        assert manifest(tmp_path / "t")["seed"] == 3

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"nonsense": 1}')
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == 2
        assert "nonsense" in capsys.readouterr().err

    def test_missing_demos(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text('{"total_steps": 1}')
        code = cli.main(["train", "--config", str(tmp_path / "c.json"),
                         "--demos", str(tmp_path / "gone.npz"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "gone.npz" in capsys.readouterr().err
