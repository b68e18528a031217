import numpy as np
import pytest

from safeturn.errors import EmptyBufferError, SampleBeforeLearnStartError
from safeturn.rl_agent import (ACTIONS, BetaSchedule, DQNAgent, SumTreeBuffer, Transition, build_q_network,
                               compress_state, ddqn_target_values, dqn_target_values, epsilon_schedule,
                               expand_state, greedy_action, importance_weights, load_q_network, q_values,
                               sample_probability, save_q_network, select_action, td_error, train_step)


def random_transition(rng, shape, terminal=False):
    state = (rng.random(shape) < 0.05).astype(np.float32) * 0.5
    next_state = (rng.random(shape) < 0.05).astype(np.float32) * 0.5
    return Transition.from_tensors(state, rng.uniform(0, 10), int(rng.integers(4)), rng.normal(),
                                   next_state, rng.uniform(0, 10), terminal)


class TestTargets:
    def test_ddqn_decouples_selection_from_evaluation(self):
        value = ddqn_target_values([1.0], [[0.2, 0.5, 0.1, 0.0]], [[1.0, 2.0, 9.9, 0.0]], [False], 0.95)
        assert value[0] == pytest.approx(2.9)

    def test_dqn_bootstraps_on_max(self):
        value = dqn_target_values([1.0], [[1.0, 2.0, 9.9, 0.0]], [False], 0.95)
        assert value[0] == pytest.approx(10.405)

    def test_terminal_ignores_bootstrap(self):
        assert ddqn_target_values([0.7], [[5, 1, 1, 1]], [[9, 9, 9, 9]], [True], 0.95)[0] == 0.7
        assert dqn_target_values([-1.5], [[9, 9, 9, 9]], [True], 0.95)[0] == -1.5

    def test_td_error_sign(self, small_roi, small_agent):
        net = build_q_network(small_roi, small_agent, seed=1)
        rng = np.random.default_rng(0)
        transition = random_transition(rng, small_roi.shape, terminal=True)
        q = q_values(net, [expand_state(transition.state, small_roi.shape)], [transition.speed])[0]
        delta = td_error(transition, net, net, 0.95, small_roi.shape)
        assert delta == pytest.approx(transition.reward - q[transition.action], abs=1e-5)


class TestActionSelection:
    def test_greedy_ties_go_to_lowest_index(self):
        assert greedy_action([0.3, 0.9, 0.9, 0.1]) == 1

    def test_epsilon_one_is_uniform(self, small_roi, small_agent):
        net = build_q_network(small_roi, small_agent)
        rng = np.random.default_rng(0)
        state = np.zeros(small_roi.shape, dtype=np.float32)
        picks = [select_action(state, 0.0, net, 1.0, rng) for _ in range(400)]
        counts = np.bincount(picks, minlength=len(ACTIONS))
        assert counts.min() > 60

    def test_epsilon_zero_is_greedy(self, small_roi, small_agent):
        net = build_q_network(small_roi, small_agent, seed=3)
        state = np.zeros(small_roi.shape, dtype=np.float32)
        expected = greedy_action(q_values(net, [state], [2.0])[0])
        rng = np.random.default_rng(0)
        assert all(select_action(state, 2.0, net, 0.0, rng) == expected for _ in range(5))

    def test_epsilon_schedule(self, small_agent):
        assert epsilon_schedule(0, small_agent) == 1.0
        assert epsilon_schedule(10, small_agent) == pytest.approx(0.99 ** 10)
        assert epsilon_schedule(10_000, small_agent) == small_agent.epsilon_min


class TestPrioritizedReplay:
    def test_sample_probability_and_weights(self):
        np.testing.assert_allclose(sample_probability([1.0, 1.0, 2.0], 1.0), [0.25, 0.25, 0.5])
        np.testing.assert_allclose(sample_probability([1.0, 4.0], 0.0), [0.5, 0.5])
        np.testing.assert_allclose(importance_weights([0.75, 0.25], 2, 1.0), [1.0 / 3.0, 1.0])
        np.testing.assert_allclose(importance_weights([0.75, 0.25], 2, 0.0), [1.0, 1.0])

    def test_empty_and_early_sampling(self):
        buffer = SumTreeBuffer(capacity=4, learn_start=3)
        with pytest.raises(EmptyBufferError):
            buffer.sample(2)
        buffer.push("a")
        with pytest.raises(SampleBeforeLearnStartError):
            buffer.sample(2)

    def test_new_entries_get_max_priority(self):
        buffer = SumTreeBuffer(capacity=4, alpha=1.0, learn_start=1, validate=True)
        buffer.push("a")
        buffer.update_priorities([0], [3.0])
        buffer.push("b")
        np.testing.assert_allclose(buffer.leaf_priorities(), [3.0 + buffer.per_eps] * 2)

    def test_single_entry_fills_the_batch(self):
        buffer = SumTreeBuffer(capacity=4, learn_start=1)
        buffer.push("only")
        batch, probs, slots = buffer.sample(32, np.random.default_rng(0))
        assert batch == ["only"] * 32
        np.testing.assert_allclose(probs, 1.0)
        assert set(slots.tolist()) == {0}

    def test_ring_buffer_evicts_oldest(self):
        buffer = SumTreeBuffer(capacity=3, learn_start=1)
        slots = [buffer.push(i) for i in range(5)]
        assert slots == [0, 1, 2, 0, 1]
        assert len(buffer) == 3
        assert buffer.data == [3, 4, 2]

    def test_tree_sums_stay_consistent(self):
        rng = np.random.default_rng(0)
        buffer = SumTreeBuffer(capacity=16, alpha=0.6, learn_start=1, validate=True)
        for i in range(40):
            buffer.push(i)
            if i % 3 == 0:
                buffer.update_priorities(rng.integers(0, len(buffer), size=4), rng.normal(size=4))
        buffer.check_consistency(rtol=1e-12)
        assert buffer.total == pytest.approx(buffer.leaf_priorities().sum())

    def test_sampling_follows_priorities(self):
        buffer = SumTreeBuffer(capacity=4, alpha=1.0, learn_start=1)
        for i in range(4):
            buffer.push(i)
        buffer.update_priorities(np.arange(4), [1.0, 1.0, 2.0, 4.0])
        rng = np.random.default_rng(1)
        counts = np.zeros(4)
        for _ in range(2000):
            _, probs, slots = buffer.sample(4, rng)
            np.add.at(counts, slots, 1)
        np.testing.assert_allclose(counts / counts.sum(), [0.125, 0.125, 0.25, 0.5], atol=0.02)
        np.testing.assert_allclose(probs, buffer.tree[slots + 3] / buffer.total)

    def test_state_compression(self, small_roi):
        tensor = np.zeros(small_roi.shape, dtype=np.float32)
        tensor[3, 4] = [0.5, -1.25, 90.0]
        matrix = compress_state(tensor)
        assert matrix.nnz == 3
        np.testing.assert_array_equal(expand_state(matrix, small_roi.shape), tensor)


class TestBetaSchedule:
    def test_linear_anneal_to_one(self):
        beta = BetaSchedule(beta_start=0.4, episodes=2, default_length=10)
        assert beta.value == pytest.approx(0.4)
        beta.advance(10)
        assert beta.value == pytest.approx(0.7)
        beta.end_episode(5)
        # horizon shrinks to 2 x 5 steps
        assert beta.value == pytest.approx(1.0)
        beta.advance(100)
        assert beta.value == 1.0


class TestLearning:
    def test_train_step_updates_priorities(self, small_roi, small_agent):
        rng = np.random.default_rng(0)
        buffer = SumTreeBuffer(64, small_agent.alpha, small_agent.learn_start)
        for _ in range(12):
            buffer.push(random_transition(rng, small_roi.shape))
        online = build_q_network(small_roi, small_agent, seed=0)
        result = train_step(buffer, online, online, small_agent, None, 0.4, rng, small_roi.shape)
        assert np.isfinite(result.loss)
        assert result.td_errors.shape == (small_agent.batch_size,)
        stored = buffer.tree[result.slots + buffer.capacity - 1]
        expected = (np.abs(result.td_errors) + buffer.per_eps) ** small_agent.alpha
        # a slot drawn twice keeps its last update
        last = {s: e for s, e in zip(result.slots, expected)}
        np.testing.assert_allclose([last[s] for s in result.slots], stored)
        assert result.online is not online

    def test_agent_syncs_target_periodically(self, small_roi, small_agent):
        agent = DQNAgent(small_agent, small_roi, seed=0)
        rng = np.random.default_rng(0)
        losses = []
        for _ in range(25):
            agent.remember(random_transition(rng, small_roi.shape))
            agent.observe_step()
            losses.append(agent.learn())
        assert losses[:small_agent.learn_start - 1] == [None] * (small_agent.learn_start - 1)
        assert all(np.isfinite(loss) for loss in losses[small_agent.learn_start - 1:])
        assert agent.target_syncs == 25 // small_agent.target_update_every
        assert agent.target is not agent.online

    def test_checkpoint_round_trip(self, tmp_path, small_roi, small_agent):
        net = build_q_network(small_roi, small_agent, seed=7)
        save_q_network(net, tmp_path / "q_srl.sdqn")
        restored = load_q_network(tmp_path / "q_srl.sdqn", small_roi, small_agent)
        state = np.zeros(small_roi.shape, dtype=np.float32)
        np.testing.assert_array_equal(q_values(restored, [state], [4.0]), q_values(net, [state], [4.0]))
