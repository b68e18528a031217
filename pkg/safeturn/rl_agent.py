"""
DQN / DDQN learner with proportional prioritized replay.

States are (grid tensor, ego speed) pairs; the grid goes through the conv
stack and the speed joins after flattening.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import sparse

from .checkpoint import load_checkpoint, network_from_tensors, network_tensors, save_checkpoint
from .errors import EmptyBufferError, SampleBeforeLearnStartError
from .optim import OptimizerState, init_optimizer_state, optimizer_step
from .state_encoder import RoiSpec
from .tensor_nn import LayerSpec, NetworkParams, backward, forward, init_network, weighted_mse
from .world_sim import MAX_STEPS

logger = logging.getLogger(__name__)

# Throttle per action index
ACTIONS = (-1.0, -0.4, 0.2, 1.0)
BRAKE_ACTION = 0

# Divisors applied to the state layers (occupancy, relative speed, relative heading) and ego speed
LAYER_SCALE = np.array([1.0, 1.0 / 10.0, 1.0 / 180.0], dtype=np.float32)
SPEED_SCALE = 1.0 / 10.0


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.95
    lr: float = 0.00025
    optimizer: str = "rmsprop"
    batch_size: int = 32
    learn_start: int = 750
    target_update_every: int = 5000
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    epsilon_decay: float = 0.99
    alpha: float = 0.6
    beta_start: float = 0.4
    episodes: int = 500
    capacity: int = 10_000
    per_eps: float = 1e-5
    target_kind: str = "ddqn"
    conv_filters: int = 64
    conv_kernel: int = 3
    pool_kernel: int = 5
    pool_stride: int = 3
    relu_q_head: bool = False
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.target_kind not in ("ddqn", "dqn"):
            raise ValueError(f"target_kind must be 'ddqn' or 'dqn', got '{self.target_kind}'")
        if not 0.0 <= self.epsilon_min <= self.epsilon_start <= 1.0:
            raise ValueError("epsilon bounds must satisfy 0 <= epsilon_min <= epsilon_start <= 1")
        if self.batch_size <= 0 or self.capacity <= 0 or self.learn_start <= 0:
            raise ValueError("batch_size, capacity and learn_start must be positive")


# ============================================================
# Q-network
# ============================================================

def q_network_layers(config: AgentConfig = AgentConfig()) -> list:
    """Three conv/pool stages, flatten, ego speed, then 512-256-64-4."""
    k, p, s, f = config.conv_kernel, config.pool_kernel, config.pool_stride, config.conv_filters
    layers = []
    for i in (1, 2, 3):
        layers += [LayerSpec("conv2d", f"conv{i}", kernel=(k, k), stride=(1, 1), units=f),
                   LayerSpec("relu", f"conv{i}_relu"),
                   LayerSpec("avgpool2d", f"pool{i}", kernel=(p, p), stride=(s, s))]
    layers += [LayerSpec("flatten", "flatten"), LayerSpec("concat-aux", "speed")]
    for i, units in enumerate((512, 256, 64), start=1):
        layers += [LayerSpec("dense", f"fc{i}", units=units), LayerSpec("relu", f"fc{i}_relu")]
    layers.append(LayerSpec("dense", "fc4", units=len(ACTIONS)))
    if config.relu_q_head:
        layers.append(LayerSpec("relu", "fc4_relu"))
    return layers


def build_q_network(roi: RoiSpec = RoiSpec(), config: AgentConfig = AgentConfig(), seed: int = 0) -> NetworkParams:
    return init_network(q_network_layers(config), roi.shape, aux_size=1, seed=seed)


def prepare_inputs(states, speeds):
    """Scale a batch of (rows, cols, 3) tensors and ego speeds for the network."""
    grid = np.asarray(states, dtype=np.float32) * LAYER_SCALE
    aux = (np.asarray(speeds, dtype=np.float32) * SPEED_SCALE).reshape(-1, 1)
    return grid, aux


def q_values(net: NetworkParams, states, speeds) -> np.ndarray:
    grid, aux = prepare_inputs(states, speeds)
    return forward(net, grid, aux)[0]


def save_q_network(net: NetworkParams, path):
    return save_checkpoint(path, network_tensors(net))


def load_q_network(path, roi: RoiSpec = RoiSpec(), config: AgentConfig = AgentConfig()) -> NetworkParams:
    return network_from_tensors(q_network_layers(config), roi.shape, 1, load_checkpoint(path))


# ============================================================
# Replay memory
# ============================================================

def compress_state(tensor) -> sparse.csr_matrix:
    tensor = np.asarray(tensor, dtype=np.float32)
    return sparse.csr_matrix(tensor.reshape(tensor.shape[0], -1))


def expand_state(matrix: sparse.csr_matrix, shape) -> np.ndarray:
    return matrix.toarray().reshape(shape)


@dataclass(frozen=True, eq=False)
class Transition:
    state: sparse.csr_matrix
    speed: float
    action: int
    reward: float
    next_state: sparse.csr_matrix
    next_speed: float
    terminal: bool

    @classmethod
    def from_tensors(cls, state, speed, action, reward, next_state, next_speed, terminal) -> "Transition":
        return cls(compress_state(state), float(speed), int(action), float(reward),
                   compress_state(next_state), float(next_speed), bool(terminal))


def sample_probability(priorities, alpha: float) -> np.ndarray:
    """P(i) = p_i^alpha / sum_k p_k^alpha."""
    p = np.asarray(priorities, dtype=np.float64)
    if p.size == 0:
        raise EmptyBufferError("no priorities to normalize")
    if np.any(p <= 0):
        raise ValueError("priorities must be positive")
    scaled = p ** alpha
    return scaled / scaled.sum()


def importance_weights(probabilities, size: int, beta: float) -> np.ndarray:
    """(N * P)^-beta normalized by the batch maximum."""
    p = np.asarray(probabilities, dtype=np.float64)
    w = (size * p) ** (-beta)
    return w / w.max()


class SumTreeBuffer:
    """
    Ring buffer of transitions with a binary sum tree over priority^alpha.

    Leaves live at tree indices capacity-1 .. 2*capacity-2.
    """

    def __init__(self, capacity: int = 10_000, alpha: float = 0.6, learn_start: int = 750,
                 per_eps: float = 1e-5, validate: bool = False):
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.learn_start = int(learn_start)
        self.per_eps = float(per_eps)
        self.validate = validate
        self.tree = np.zeros(2 * self.capacity - 1)
        self.data = [None] * self.capacity
        self.cursor = 0
        self.size = 0
        self.max_priority = 1.0

    def __len__(self):
        return self.size

    @property
    def total(self) -> float:
        return float(self.tree[0])

    def _set_leaf(self, leaf: int, value: float):
        idx = leaf + self.capacity - 1
        self.tree[idx] = value
        while idx > 0:
            idx = (idx - 1) // 2
            self.tree[idx] = self.tree[2 * idx + 1] + self.tree[2 * idx + 2]
        if self.validate:
            self.check_consistency()

    def push(self, transition) -> int:
        """Insert at the current max priority, evicting the oldest entry when full."""
        slot = self.cursor
        self.data[slot] = transition
        self._set_leaf(slot, self.max_priority ** self.alpha)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return slot

    def leaf_priorities(self) -> np.ndarray:
        """Stored priority^alpha of the filled slots."""
        return self.tree[self.capacity - 1:self.capacity - 1 + self.size].copy()

    def _retrieve(self, value: float) -> int:
        idx = 0
        while True:
            left = 2 * idx + 1
            if left >= len(self.tree):
                break
            if value < self.tree[left]:
                idx = left
            else:
                value -= self.tree[left]
                idx = left + 1
        leaf = idx - (self.capacity - 1)
        return min(leaf, self.size - 1)

    def sample(self, batch_size: int = 32, rng: Optional[np.random.Generator] = None):
        """
        Stratified proportional sampling: one uniform draw per equal slice of the total.

        Returns:
            tuple: (transitions, probabilities P(i), slot indices)
        """
        if self.size == 0:
            raise EmptyBufferError("replay buffer is empty")
        if self.size < self.learn_start:
            raise SampleBeforeLearnStartError(self.size, self.learn_start)
        rng = rng if rng is not None else np.random.default_rng()
        total = self.total
        segment = total / batch_size
        slots = np.empty(batch_size, dtype=np.int64)
        for i in range(batch_size):
            value = min(rng.uniform(i * segment, (i + 1) * segment), np.nextafter(total, 0.0))
            slots[i] = self._retrieve(value)
        probs = self.tree[slots + self.capacity - 1] / total
        return [self.data[s] for s in slots], probs, slots

    def update_priorities(self, slots, td_errors):
        """Set priorities to |delta| + per_eps."""
        for slot, delta in zip(np.asarray(slots).tolist(), np.asarray(td_errors, dtype=np.float64).tolist()):
            priority = abs(delta) + self.per_eps
            self.max_priority = max(self.max_priority, priority)
            self._set_leaf(slot, priority ** self.alpha)

    def check_consistency(self, rtol: float = 0.0):
        internal = self.capacity - 1
        if internal == 0:
            return
        idx = np.arange(internal)
        sums = self.tree[2 * idx + 1] + self.tree[2 * idx + 2]
        if not np.allclose(self.tree[idx], sums, rtol=rtol, atol=0.0):
            bad = int(idx[~np.isclose(self.tree[idx], sums, rtol=rtol, atol=0.0)][0])
            raise AssertionError(f"sum-tree node {bad} differs from the sum of its children")


# ============================================================
# Targets and action selection
# ============================================================

def dqn_target_values(rewards, next_q_online, terminals, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    bootstrap = np.max(np.asarray(next_q_online, dtype=np.float64).reshape(len(rewards), -1), axis=1)
    return np.where(np.asarray(terminals, dtype=bool), rewards, rewards + gamma * bootstrap)


def ddqn_target_values(rewards, next_q_online, next_q_target, terminals, gamma: float,
                       return_actions: bool = False):
    """Online net picks the bootstrap action, target net scores it."""
    rewards = np.asarray(rewards, dtype=np.float64)
    q_online = np.asarray(next_q_online, dtype=np.float64).reshape(len(rewards), -1)
    q_target = np.asarray(next_q_target, dtype=np.float64).reshape(len(rewards), -1)
    chosen = np.argmax(q_online, axis=1)
    bootstrap = q_target[np.arange(len(rewards)), chosen]
    targets = np.where(np.asarray(terminals, dtype=bool), rewards, rewards + gamma * bootstrap)
    return (targets, chosen) if return_actions else targets


def dqn_target(reward: float, next_state, next_speed: float, terminal: bool, online: NetworkParams,
               gamma: float) -> float:
    if terminal:
        return float(reward)
    q = q_values(online, [next_state], [next_speed])
    return float(dqn_target_values([reward], q, [False], gamma)[0])


def ddqn_target(reward: float, next_state, next_speed: float, terminal: bool, online: NetworkParams,
                target: NetworkParams, gamma: float) -> float:
    if terminal:
        return float(reward)
    q_on = q_values(online, [next_state], [next_speed])
    q_tg = q_values(target, [next_state], [next_speed])
    return float(ddqn_target_values([reward], q_on, q_tg, [False], gamma)[0])


def td_error(transition: Transition, online: NetworkParams, target: NetworkParams, gamma: float,
             shape, kind: str = "ddqn") -> float:
    """delta = target value - Q_online(state, action)."""
    state = expand_state(transition.state, shape)
    next_state = expand_state(transition.next_state, shape)
    if kind == "ddqn":
        y = ddqn_target(transition.reward, next_state, transition.next_speed, transition.terminal,
                        online, target, gamma)
    else:
        y = dqn_target(transition.reward, next_state, transition.next_speed, transition.terminal, online, gamma)
    q = q_values(online, [state], [transition.speed])[0, transition.action]
    return float(y - q)


def greedy_action(q) -> int:
    """argmax with ties going to the lowest index."""
    return int(np.argmax(np.asarray(q)))


def select_action(state, speed: float, online: NetworkParams, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over the online net."""
    if rng.random() < epsilon:
        return int(rng.integers(len(ACTIONS)))
    return greedy_action(q_values(online, [state], [speed])[0])


def epsilon_schedule(episode: int, config: AgentConfig = AgentConfig()) -> float:
    return max(config.epsilon_min, config.epsilon_start * config.epsilon_decay ** episode)


class BetaSchedule:
    """Linear beta annealing over episodes x running mean episode length."""

    def __init__(self, beta_start: float = 0.4, episodes: int = 500, default_length: int = MAX_STEPS):
        self.beta_start = beta_start
        self.episodes = episodes
        self.default_length = default_length
        self.steps = 0
        self.finished_episodes = 0
        self.finished_steps = 0

    @property
    def horizon(self) -> float:
        mean_length = (self.finished_steps / self.finished_episodes if self.finished_episodes
                       else self.default_length)
        return max(self.episodes * mean_length, 1.0)

    @property
    def value(self) -> float:
        return self.beta_start + (1.0 - self.beta_start) * min(1.0, self.steps / self.horizon)

    def advance(self, steps: int = 1):
        self.steps += steps

    def end_episode(self, length: int):
        self.finished_episodes += 1
        self.finished_steps += length


# ============================================================
# Learning
# ============================================================

@dataclass(frozen=True, eq=False)
class TrainStepResult:
    online: NetworkParams
    optimizer_state: OptimizerState
    loss: float
    td_errors: np.ndarray
    slots: np.ndarray
    beta: float


def train_step(buffer: SumTreeBuffer, online: NetworkParams, target: NetworkParams, config: AgentConfig,
               optimizer_state: Optional[OptimizerState], beta: float, rng: np.random.Generator,
               shape) -> TrainStepResult:
    """One importance-weighted gradient step on a prioritized batch; refreshes the batch priorities."""
    batch, probs, slots = buffer.sample(config.batch_size, rng)
    states = np.stack([expand_state(t.state, shape) for t in batch])
    next_states = np.stack([expand_state(t.next_state, shape) for t in batch])
    speeds = np.array([t.speed for t in batch])
    next_speeds = np.array([t.next_speed for t in batch])
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch])
    terminals = np.array([t.terminal for t in batch])

    next_online = q_values(online, next_states, next_speeds)
    if config.target_kind == "ddqn":
        targets = ddqn_target_values(rewards, next_online, q_values(target, next_states, next_speeds),
                                     terminals, config.gamma)
    else:
        targets = dqn_target_values(rewards, next_online, terminals, config.gamma)

    grid, aux = prepare_inputs(states, speeds)
    q, tape = forward(online, grid, aux)
    rows = np.arange(len(batch))
    chosen = q[rows, actions]
    weights = importance_weights(probs, len(buffer), beta)
    loss, grad_chosen = weighted_mse(chosen, targets.astype(q.dtype), weights.astype(q.dtype))
    dout = np.zeros_like(q)
    dout[rows, actions] = grad_chosen
    grads = backward(online, tape, dout)
    online, optimizer_state = optimizer_step(config.optimizer, online, grads, config.lr, optimizer_state)

    td = targets - chosen.astype(np.float64)
    buffer.update_priorities(slots, td)
    return TrainStepResult(online=online, optimizer_state=optimizer_state, loss=loss, td_errors=td,
                           slots=slots, beta=beta)


class DQNAgent:
    """Online/target nets, replay memory and schedules for one training run."""

    def __init__(self, config: AgentConfig = AgentConfig(), roi: RoiSpec = RoiSpec(), seed: int = 0,
                 online: Optional[NetworkParams] = None):
        self.config = config
        self.roi = roi
        self.rng = np.random.default_rng(seed)
        self.online = online if online is not None else build_q_network(roi, config, seed)
        self.target = self.online
        self.optimizer_state = init_optimizer_state(config.optimizer, self.online)
        self.buffer = SumTreeBuffer(config.capacity, config.alpha, config.learn_start, config.per_eps)
        self.beta = BetaSchedule(config.beta_start, config.episodes)
        self.steps = 0
        self.target_syncs = 0

    def act(self, state, speed: float, epsilon: float) -> int:
        return select_action(state, speed, self.online, epsilon, self.rng)

    def remember(self, transition: Transition):
        self.buffer.push(transition)

    def observe_step(self):
        """Count one environment step; sync the target net every target_update_every steps."""
        self.steps += 1
        if self.steps % self.config.target_update_every == 0:
            self.sync_target()

    def sync_target(self):
        self.target = replace(self.online)
        self.target_syncs += 1
        logger.debug("target network synced at step %d", self.steps)

    def learn(self) -> Optional[float]:
        if len(self.buffer) < self.config.learn_start:
            return None
        result = train_step(self.buffer, self.online, self.target, self.config, self.optimizer_state,
                            self.beta.value, self.rng, self.roi.shape)
        self.beta.advance()
        self.online = result.online
        self.optimizer_state = result.optimizer_state
        return result.loss

    def end_episode(self, length: int):
        self.beta.end_episode(length)
