import numpy as np
import pytest

from safeturn.errors import TrajectoryLengthError
from safeturn.geometry import point_rect_distance
from safeturn.safety_shield import (ShieldConfig, WorldView, analytic_dynamics, constant_velocity_view, filter_action,
                                    ground_truth_collision, predicts_collision, rollout_ego, rollout_pedestrians,
                                    rollout_stopping)
from safeturn.selfcheck import noiseless_windows, random_scene
from safeturn.world_sim import ego_dynamics_step, initial_ego


def static_view(ego, route, offsets):
    """Stationary pedestrians at ``offsets`` (m) from the ego centre."""
    current = ego.position + np.asarray(offsets, dtype=float)
    return WorldView(ego, route, np.arange(10, 10 + len(current)), current, current.copy())


class TestRollouts:
    def test_ego_rollout_covers_the_window(self, four_way):
        config = ShieldConfig()
        poses = rollout_ego(initial_ego(four_way, speed=5.0), 0.2, four_way.route, config=config)
        assert len(poses) == config.virtual_steps + 1
        assert config.virtual_steps * config.virtual_dt >= config.window
        assert poses[0] == initial_ego(four_way, speed=5.0)
        assert [p.route_s for p in poses] == sorted(p.route_s for p in poses)

    def test_pedestrian_interpolation(self):
        trajs = rollout_pedestrians([[0.0, 0.0]], [[8.0, 4.0]], ShieldConfig(virtual_steps=8))
        assert trajs.shape == (1, 9, 2)
        np.testing.assert_allclose(trajs[0, 2], [2.0, 1.0])
        np.testing.assert_allclose(trajs[0, -1], [8.0, 4.0])

    def test_pedestrians_extrapolate_past_the_endpoint(self):
        trajs = rollout_pedestrians([[0.0, 0.0]], [[8.0, 4.0]], ShieldConfig(virtual_steps=8), steps=12)
        assert trajs.shape == (1, 13, 2)
        np.testing.assert_allclose(trajs[0, 12], [12.0, 6.0])

    def test_stopping_rollout_ends_standing(self, four_way):
        poses = rollout_stopping(initial_ego(four_way, speed=12.0), 1.0, four_way.route)
        assert poses[1].speed == 12.0
        assert poses[-1].speed == 0.0 and all(p.speed > 0.0 for p in poses[:-1])
        assert len(poses) <= ShieldConfig().stopping_steps + 1
        assert [p.route_s for p in poses] == sorted(p.route_s for p in poses)

    def test_virtual_dt_reaches_the_analytic_rollout(self, four_way):
        config = ShieldConfig(virtual_dt=0.1, virtual_steps=5)
        ego = initial_ego(four_way, speed=6.0)
        poses = rollout_ego(ego, 0.0, four_way.route, config=config)
        assert poses[-1].route_s == pytest.approx(6.0 * 0.5)
        assert analytic_dynamics(config)(ego, 0.0, four_way.route) == ego_dynamics_step(ego, 0.0, four_way.route, 0.1)

    def test_length_mismatch(self, four_way):
        poses = rollout_ego(initial_ego(four_way), 0.0, four_way.route)
        with pytest.raises(TrajectoryLengthError):
            predicts_collision(poses, np.zeros((1, len(poses) - 1, 2)))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ShieldConfig(virtual_steps=4)
        with pytest.raises(ValueError):
            ShieldConfig(distance_threshold=0.0)
        with pytest.raises(ValueError):
            ShieldConfig(stopping_steps=-1)


class TestFilterAction:
    def test_no_pedestrians_passes_through(self, four_way):
        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, np.zeros((0, 2)))
        decision = filter_action(1.0, view)
        assert not decision.intervened and decision.executed == 1.0

    def test_far_pedestrian_passes_through(self, four_way):
        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, [[0.0, 20.0]])
        decision = filter_action(1.0, view)
        assert not decision.intervened
        assert decision.prediction.min_distance > 10.0

    def test_pedestrian_in_path_forces_brake(self, four_way):
        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, [[0.0, 30.0], [0.0, 6.0]])
        decision = filter_action(1.0, view)
        assert decision.intervened
        assert decision.executed == -1.0
        assert decision.nominated == 1.0
        assert decision.prediction.pedestrian == 11
        assert 0 < decision.prediction.step <= 8

    def test_braking_already_is_kept(self, four_way):
        view = static_view(initial_ego(four_way, speed=0.0), four_way.route, [[0.0, 6.0]])
        decision = filter_action(-1.0, view)
        assert not decision.intervened

    def test_pedestrian_beside_is_ignored(self, four_way):
        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, [[4.0, 3.0]])
        assert not filter_action(1.0, view).intervened

    def test_custom_dynamics_is_used(self, four_way):
        calls = []

        def frozen(ego, throttle, route):
            calls.append(throttle)
            return ego

        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, [[0.0, 6.0]])
        assert not filter_action(1.0, view, dynamics=frozen).intervened
        # window rollout, then one committed tick and the capped stopping rollout
        assert calls == [1.0] * 8 + [1.0] + [-1.0] * (ShieldConfig().stopping_steps - 1)


def drive_at_full_throttle(layout, pedestrian, config, ticks):
    """Closed loop of a policy that always nominates 1.0 behind the shield; returns gaps and interventions."""
    ego = initial_ego(layout, speed=12.0)
    gaps, interventions = [], 0
    for _ in range(ticks):
        view = WorldView(ego, layout.route, np.array([7]), pedestrian[None, :], pedestrian[None, :])
        decision = filter_action(1.0, view, config=config)
        interventions += decision.intervened
        ego = ego_dynamics_step(ego, decision.executed, layout.route)
        gaps.append(float(point_rect_distance(pedestrian[None, :], ego.position, ego.heading)[0]))
    return np.array(gaps), interventions


class TestStoppingCheck:
    def test_fires_when_the_window_is_clear(self, four_way):
        ego = initial_ego(four_way, speed=12.0)
        view = static_view(ego, four_way.route, [[0.0, 12.0]])
        decision = filter_action(1.0, view)
        assert decision.intervened and decision.executed == -1.0
        assert decision.prediction.rollout == "stopping"
        assert not filter_action(1.0, view, config=ShieldConfig(stopping_steps=0)).intervened

    def test_window_hits_are_labelled(self, four_way):
        view = static_view(initial_ego(four_way, speed=10.0), four_way.route, [[0.0, 6.0]])
        assert filter_action(1.0, view).prediction.rollout == "window"

    @pytest.mark.parametrize("route_s", [14.0, 25.0])
    def test_full_throttle_never_reaches_a_standing_pedestrian(self, four_way, route_s):
        config = ShieldConfig()
        pedestrian = np.array(four_way.route.pose_at(route_s)[:2])
        gaps, interventions = drive_at_full_throttle(four_way, pedestrian, config, ticks=120)
        assert interventions > 0
        assert gaps.min() >= config.distance_threshold

    def test_window_alone_cannot_stop_a_fast_ego(self, four_way):
        config = ShieldConfig(stopping_steps=0)
        pedestrian = np.array(four_way.route.pose_at(14.0)[:2])
        gaps, _ = drive_at_full_throttle(four_way, pedestrian, config, ticks=60)
        assert gaps.min() < config.distance_threshold


class TestOracle:
    def test_constant_velocity_view_agrees_with_ground_truth(self, four_way, rng):
        config = ShieldConfig()
        for _ in range(200):
            ego = initial_ego(four_way, speed=rng.uniform(0, 12), route_s=rng.uniform(0, 40))
            n = int(rng.integers(1, 5))
            positions = ego.position + rng.uniform(-6, 6, size=(n, 2))
            speeds = rng.uniform(0.2, 1.8, size=n)
            headings = rng.uniform(0, 360, size=n)
            throttle = float(rng.choice([-1.0, -0.4, 0.2, 1.0]))
            view = constant_velocity_view(ego, four_way.route, np.arange(n),
                                          noiseless_windows(positions, speeds, headings), config)
            predicted = filter_action(throttle, view, config=config).intervened
            assert predicted == ground_truth_collision(ego, four_way.route, throttle, positions, speeds,
                                                       headings, config)

    def test_walking_into_the_ego(self, four_way):
        ego = initial_ego(four_way, speed=0.0)
        start = ego.position + np.array([1.9, 0.0])
        assert ground_truth_collision(ego, four_way.route, 0.0, start[None, :], [1.5], [180.0])
        assert not ground_truth_collision(ego, four_way.route, 0.0, start[None, :], [1.5], [0.0])

    def test_intervention_never_moves_further_than_nominated(self, four_way, rng):
        config = ShieldConfig()
        interventions = 0
        for _ in range(300):
            ego, positions, speeds, headings, throttle = random_scene(rng, four_way)
            view = constant_velocity_view(ego, four_way.route, np.arange(len(positions)),
                                          noiseless_windows(positions, speeds, headings), config)
            decision = filter_action(throttle, view, config=config)
            if not decision.intervened:
                assert decision.executed == throttle
                continue
            interventions += 1
            executed = ego_dynamics_step(ego, decision.executed, four_way.route)
            nominated = ego_dynamics_step(ego, decision.nominated, four_way.route)
            assert executed.route_s - ego.route_s <= nominated.route_s - ego.route_s
            assert executed.speed <= nominated.speed
        assert interventions > 0
