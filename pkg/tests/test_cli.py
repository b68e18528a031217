import json

import pandas as pd
import pytest

from safeturn.cli import EXIT_CONFIG, EXIT_OK, EXIT_THRESHOLD, build_parser, main


def run(*argv):
    return main([*argv, "--quiet"])


class TestParser:
    def test_unknown_command(self):
        assert main(["fly"]) == EXIT_CONFIG

    def test_common_flags_on_every_command(self):
        args = build_parser().parse_args(["eval", "--seed", "7", "--set", "reward.d1=6", "--profile", "desk"])
        assert (args.seed, args.set, args.profile) == (7, ["reward.d1=6"], "desk")
        assert args.func.__name__ == "_cmd_eval"

    def test_help_lists_defaults(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "reward.d1 = 7.0" in capsys.readouterr().out


class TestErrors:
    def test_missing_models(self, tmp_path):
        assert run("eval", "--variant", "srl", "--out", str(tmp_path)) == EXIT_CONFIG

    def test_bad_override(self, tmp_path):
        assert run("eval", "--set", "reward.d9=1", "--out", str(tmp_path)) == EXIT_CONFIG
        assert run("eval", "--set", "reward.d1", "--out", str(tmp_path)) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run("selfcheck", "--config", str(tmp_path / "absent.cfg")) == EXIT_CONFIG


class TestSelfcheck:
    def test_passing_suite(self, tmp_path, capsys):
        assert run("selfcheck", "--suite", "ddqn", "--out", str(tmp_path)) == EXIT_OK
        assert "ddqn" in capsys.readouterr().out

    def test_failing_suite_exits_with_threshold_code(self, tmp_path):
        assert run("selfcheck", "--suite", "per", "--set", "selfcheck.per_draws=8") == EXIT_THRESHOLD


class TestEval:
    def test_rule_based_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "eval"
        code = run("eval", "--variant", "rule-based", "--episodes", "2", "--workers", "1", "--profile", "desk",
                   "--seed", "3", "--out", str(out))
        assert code == EXIT_OK
        for name in ("metrics.csv", "table.csv", "table.xlsx", "episodes.jsonl", "run.json"):
            assert (out / name).exists(), name
        table = pd.read_csv(out / "table.csv")
        assert table.loc[0, "agent"] == "rule-based" and table.loc[0, "episodes"] == 2
        manifest = json.loads((out / "run.json").read_text(encoding="utf-8"))
        assert manifest["config"]["seed"] == 3 and manifest["config"]["profile"] == "desk"
        assert "Success (%)" in capsys.readouterr().out

    def test_output_bytes_do_not_depend_on_workers(self, tmp_path):
        argv = ["eval", "--variant", "rule-based", "--episodes", "2", "--profile", "desk", "--seed", "7"]
        assert run(*argv, "--workers", "1", "--out", str(tmp_path / "a")) == EXIT_OK
        assert run(*argv, "--workers", "2", "--out", str(tmp_path / "b")) == EXIT_OK
        for name in ("metrics.csv", "table.csv", "episodes.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


class TestExperiment:
    def test_check_with_rule_based_only(self, tmp_path, capsys):
        code = run("experiment", "--variants", "rule-based", "--episodes", "1", "--profile", "desk",
                   "--set", "eval.workers=1", "--check", "--out", str(tmp_path))
        assert code == EXIT_OK
        assert "rule-based" in capsys.readouterr().out
        assert (tmp_path / "table.csv").exists()

    def test_layout_override_is_recorded(self, tmp_path):
        code = run("eval", "--variant", "rule-based", "--episodes", "1", "--profile", "desk",
                   "--set", "layout.box_width=30", "--out", str(tmp_path))
        assert code == EXIT_OK
        manifest = json.loads((tmp_path / "run.json").read_text(encoding="utf-8"))
        assert manifest["config"]["geometry"]["box_width"] == 30.0


class TestRender:
    def test_selected_episode(self, tmp_path, capsys):
        rows = [{"variant": "rl", "episode": e, "seed": 0, "layout": "three-way", "step": 1, "time": 1 / 15,
                 "x": 1.75, "y": -20.0, "heading": 90.0, "speed": 1.0, "intervened": False, "pedestrians": [],
                 "outcome": None} for e in (0, 4)]
        trace = tmp_path / "episodes.jsonl"
        trace.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
        code = run("render", "--episode-trace", str(trace), "--episodes", "4", "--out", str(tmp_path))
        assert code == EXIT_OK
        assert (tmp_path / "frames" / "ep4" / "0001.ppm").exists()
        assert not (tmp_path / "frames" / "ep0").exists()
        assert (tmp_path / "trajectory_rl_ep4.png").exists()
        assert capsys.readouterr().out.startswith("1 frames")


@pytest.mark.slow
class TestModelCommands:
    def test_dynamics_fit(self, tmp_path):
        code = run("dynamics-fit", "--out", str(tmp_path), "--no-check", "--set", "models.dynamics_episodes=3",
                   "--set", "models.dynamics_steps=20", "--set", "models.dynamics_epochs=1")
        assert code == EXIT_OK
        assert (tmp_path / "dynamics.sdqn").exists() and (tmp_path / "dynamics.csv").exists()

    def test_belief_then_future_on_the_same_dataset(self, tmp_path):
        sets = ["--set", "models.pedestrian_episodes=4", "--set", "models.pedestrian_steps=30",
                "--set", "models.belief_epochs=1", "--set", "models.future_epochs=1",
                "--set", "models.hidden_units=8"]
        assert run("belief-train", "--out", str(tmp_path), "--no-check", *sets) == EXIT_OK
        dataset = tmp_path / "pedestrians.csv"
        assert dataset.exists()
        assert run("future-train", "--out", str(tmp_path), "--no-check", "--dataset", str(dataset), *sets) == EXIT_OK
        assert (tmp_path / "belief.sdqn").exists() and (tmp_path / "future.sdqn").exists()