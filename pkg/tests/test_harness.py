import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from safeturn.belief_filter import RecurrentModel, recurrent_layers
from safeturn.config import apply_overrides
from safeturn.errors import ConfigError, MissingModelError
from safeturn.harness import (OUTCOMES, VARIANTS, EpisodeMetrics, ModelSet, aggregate_from_traces,
                              comparison_claims, episode_seed, get_variant, layout_for, load_models,
                              metrics_from_rows, required_checkpoints, run_episode, run_experiment, shield_view,
                              table_row, train_agent, write_experiment)
from safeturn.rl_agent import build_q_network
from safeturn.safety_shield import ShieldConfig
from safeturn.scaling import MinMaxScaler
from safeturn.tensor_nn import init_network
from safeturn.world_sim import DT, ego_dynamics_step, initial_ego, reset


def gentle_q_net(roi, agent):
    """Q-network that always prefers the 0.2 throttle action."""
    net = build_q_network(roi, agent)
    net = net.with_weights({k: np.zeros_like(v) for k, v in net.weights.items()})
    return net.with_weight("fc4/b", np.array([0.0, 0.0, 1.0, 0.0], dtype=np.float32))


def untrained_belief():
    net = init_network(recurrent_layers("belief", units=8), (3, 4), seed=0)
    return RecurrentModel(kind="belief", net=net, inputs=MinMaxScaler(np.full(4, -5.0), np.full(4, 5.0)),
                          outputs=MinMaxScaler(np.full(4, -2.0), np.full(4, 2.0)))


def row(**overrides):
    base = {"episode": 0, "seed": 1, "variant": "srl", "layout": "four-way", "time": DT, "speed": 2.0,
            "min_distance": 3.0, "intervened": False, "reward": 0.1, "collision": False, "goal": False,
            "timeout": False, "speed_violation": False}
    base.update(overrides)
    return base


def metric(outcome, crossing_time=10.0, avg_speed=4.0, avg_distance=5.0, speed_violation=False):
    return EpisodeMetrics(episode=0, seed=0, variant="srl", layout="four-way", outcome=outcome,
                          speed_violation=speed_violation, steps=150, crossing_time=crossing_time,
                          avg_speed=avg_speed, min_distance=1.0, avg_distance=avg_distance,
                          shield_interventions=0, episode_return=0.0)


def assert_rows_match(actual, expected):
    assert actual.keys() == expected.keys()
    for key, value in expected.items():
        if isinstance(value, float) and math.isnan(value):
            assert math.isnan(actual[key]), key
        elif isinstance(value, float):
            assert actual[key] == pytest.approx(value), key
        else:
            assert actual[key] == value, key


class TestVariants:
    def test_flags(self):
        assert not VARIANTS["rule-based"].learned
        assert VARIANTS["srl"].use_belief_filter and VARIANTS["srl"].use_shield
        assert VARIANTS["collision-detector"].use_shield and not VARIANTS["collision-detector"].use_belief_filter
        assert get_variant("rl").name == "rl"
        with pytest.raises(ConfigError):
            get_variant("autopilot")

    def test_required_checkpoints(self, small_config):
        srl = get_variant("srl")
        assert required_checkpoints(srl, small_config) == {"q_net": "q_srl.sdqn", "belief": "belief.sdqn",
                                                           "future": "future.sdqn"}
        truth = replace(small_config, shield=ShieldConfig(ground_truth=True, use_trained_dynamics=True))
        assert required_checkpoints(srl, truth, include_q=False) == {"belief": "belief.sdqn",
                                                                     "dynamics": "dynamics.sdqn"}
        assert required_checkpoints(get_variant("rule-based"), small_config) == {}

    def test_missing_checkpoint(self, tmp_path, small_config):
        with pytest.raises(MissingModelError):
            load_models(get_variant("belief-update"), tmp_path, small_config)
        assert load_models(get_variant("rule-based"), tmp_path, small_config).q_net is None

    def test_episode_seeds(self):
        seeds = {episode_seed(0, i) for i in range(100)}
        assert len(seeds) == 100
        assert episode_seed(3, 7) == episode_seed(3, 7) != episode_seed(4, 7)
        assert all(0 <= s < 2 ** 64 for s in seeds)

    def test_layout_overrides_reach_the_route(self, small_config):
        config = apply_overrides(small_config, {"layout.box_width": "30", "layout.approach_length": "20"})
        layout = layout_for(config)
        assert (layout.box_width, layout.approach_length) == (30.0, 20.0)
        assert initial_ego(layout).y == pytest.approx(-11.0 - 20.0)
        assert layout.route.length > layout_for(small_config).route.length
        assert layout_for(config, "three-way").box_width == 30.0
        assert layout_for(small_config, "three-way").box_width == 26.0


class TestMetrics:
    def test_outcomes(self):
        assert metrics_from_rows([row(), row(collision=True)]).outcome == "collision"
        assert metrics_from_rows([row(), row(timeout=True)]).outcome == "timeout"
        assert metrics_from_rows([row(speed_violation=True), row(goal=True)]).outcome == "speed-violation"
        assert metrics_from_rows([row(), row(goal=True)]).outcome == "success"
        # a truncated trace never reached the goal
        assert metrics_from_rows([row()]).outcome == "timeout"

    def test_episode_statistics(self):
        rows = [row(time=DT, speed=1.0, min_distance=None, intervened=True),
                row(time=2 * DT, speed=3.0, min_distance=4.0, reward=0.5, goal=True)]
        m = metrics_from_rows(rows)
        assert m.steps == 2
        assert m.crossing_time == pytest.approx(2 * DT)
        assert m.avg_speed == 2.0
        assert m.min_distance == m.avg_distance == 4.0
        assert m.shield_interventions == 1
        assert m.episode_return == pytest.approx(0.6)

    def test_table_row(self):
        metrics = [metric("success", crossing_time=10.0, avg_speed=4.0),
                   metric("success", crossing_time=12.0, avg_speed=3.0, speed_violation=True),
                   metric("collision", avg_distance=float("nan")),
                   metric("timeout")]
        r = table_row(metrics, "srl", "four-way")
        assert (r["success_pct"], r["collision_pct"], r["timeout_pct"]) == (50.0, 25.0, 25.0)
        assert r["speed_violation_pct"] == 25.0
        assert r["crossing_time_s"] == 11.0 and r["crossing_speed_mps"] == 3.5
        assert r["avg_distance_m"] == 5.0
        assert set(OUTCOMES) >= {m.outcome for m in metrics}

    def test_table_row_without_successes(self):
        r = table_row([metric("timeout")], "rl", "three-way")
        assert math.isnan(r["crossing_time_s"]) and r["timeout_pct"] == 100.0


class TestEpisode:
    def test_missing_models(self, four_way, small_config):
        with pytest.raises(MissingModelError):
            run_episode(get_variant("srl"), four_way, ModelSet(), 0, small_config)

    def test_shield_view_from_ground_truth(self, four_way, small_config):
        world = reset(four_way, 4)
        config = replace(small_config, shield=ShieldConfig(ground_truth=True))
        view = shield_view(world, None, None, None, ModelSet(), config)
        crowd = world.crowd
        np.testing.assert_allclose(view.current, crowd.position)
        travelled = np.hypot(*(view.endpoints - view.current).T)
        np.testing.assert_allclose(travelled, crowd.speed * 8 * DT)

    def test_srl_crosses_an_empty_junction(self, four_way, small_config, small_roi, small_agent):
        config = replace(small_config, shield=ShieldConfig(ground_truth=True))
        models = ModelSet(q_net=gentle_q_net(small_roi, small_agent), belief=untrained_belief())
        world = reset(four_way, 0, pedestrians=0, spawn_batch=0)
        result = run_episode(get_variant("srl"), four_way, models, 11, config, world=world)

        ego, steps = initial_ego(four_way), 0
        while ego.route_index < four_way.route.goal_index:
            ego = ego_dynamics_step(ego, 0.2, four_way.route)
            steps += 1
        m = result.metrics
        assert m.outcome == "success"
        assert m.steps == steps
        assert m.crossing_time == pytest.approx(steps * DT)
        assert m.shield_interventions == 0
        assert not m.speed_violation
        assert {r["action"] for r in result.rows} == {2}
        assert math.isnan(m.avg_distance)

    def test_rule_based_is_reproducible(self, four_way, small_config):
        a = run_episode(get_variant("rule-based"), four_way, ModelSet(), 5, small_config)
        b = run_episode(get_variant("rule-based"), four_way, ModelSet(), 5, small_config)
        assert a.rows == b.rows
        assert a.metrics.outcome in OUTCOMES
        assert all(r["action"] is None for r in a.rows)


class TestExperiment:
    def test_table_rebuilds_from_trace(self, four_way, small_config, tmp_path):
        result = run_experiment(get_variant("rule-based"), four_way, ModelSet(), small_config, episodes=2,
                                base_seed=9)
        assert result.row["episodes"] == 2
        assert [m.seed for m in result.metrics] == [episode_seed(9, 0), episode_seed(9, 1)]

        paths = write_experiment([result], tmp_path, small_config)
        assert all(p.exists() for p in paths.values())
        assert len(pd.read_csv(paths["metrics"])) == 2
        rebuilt = aggregate_from_traces(paths["trace"])
        assert len(rebuilt) == 1
        assert_rows_match(rebuilt[0], result.row)

    def test_workers_do_not_change_results(self, four_way, small_config):
        one = run_experiment(get_variant("rule-based"), four_way, ModelSet(), small_config, episodes=2, workers=1)
        two = run_experiment(get_variant("rule-based"), four_way, ModelSet(), small_config, episodes=2, workers=2)
        def summary(result):
            return [(m.seed, m.outcome, m.steps, m.episode_return) for m in result.metrics]

        assert summary(one) == summary(two)


class TestTraining:
    def test_rule_based_cannot_train(self, four_way, small_config, tmp_path):
        with pytest.raises(ConfigError):
            train_agent(get_variant("rule-based"), four_way, ModelSet(), small_config, tmp_path)

    @pytest.mark.slow
    def test_short_run_writes_artifacts(self, four_way, small_config, tmp_path):
        online, log = train_agent(get_variant("rl"), four_way, ModelSet(), small_config, tmp_path, episodes=2)
        assert list(log["episode"]) == [0, 1]
        assert log.loc[0, "epsilon"] == 1.0
        for name in ("q_rl.sdqn", "training.csv", "training.png", "run.json",
                     "checkpoints/q_rl_ep0001.sdqn", "checkpoints/q_rl_ep0002.sdqn"):
            assert (tmp_path / name).exists(), name
        assert online.layers == build_q_network(small_config.roi, small_config.agent).layers


def claim_row(agent, success, collision):
    return {"agent": agent, "layout": "four-way", "episodes": 100, "success_pct": success,
            "collision_pct": collision, "timeout_pct": 100.0 - success - collision}


class TestComparisonClaims:
    rows = [claim_row("rule-based", 30.0, 60.0), claim_row("rl", 50.0, 20.0), claim_row("belief-update", 60.0, 10.0),
            claim_row("collision-detector", 70.0, 0.0), claim_row("srl", 80.0, 0.0)]

    def claims(self, rows, config):
        return {c.name: c.passed for c in comparison_claims(rows, config)}

    def test_expected_ordering_holds(self, small_config):
        truth = replace(small_config, shield=ShieldConfig(ground_truth=True))
        claims = self.claims(self.rows, truth)
        assert set(claims) == {"collision-detector collisions", "srl collisions", "collision ordering",
                               "srl success is highest"}
        assert all(claims.values())

    def test_ground_truth_shield_allows_no_collision(self, small_config):
        rows = self.rows[:-1] + [claim_row("srl", 80.0, 1.0)]
        assert not self.claims(rows, replace(small_config, shield=ShieldConfig(ground_truth=True)))["srl collisions"]
        # a perceived shield is held to the noisy-belief limit instead
        assert self.claims(rows, small_config)["srl collisions"]

    def test_violations_are_reported(self, small_config):
        rows = [claim_row("rule-based", 30.0, 10.0), claim_row("rl", 90.0, 20.0),
                claim_row("belief-update", 60.0, 10.0), claim_row("srl", 80.0, 0.0)]
        claims = self.claims(rows, small_config)
        assert not claims["collision ordering"]
        assert not claims["srl success is highest"]

    def test_absent_variants_skip_their_claims(self, small_config):
        assert comparison_claims([claim_row("rule-based", 30.0, 60.0)], small_config) == []
        assert set(self.claims(self.rows[:2], small_config)) == set()
