"""
Agent variants, episode runner, experiments and training loop.

Per step: noisy observation -> (belief update) -> state encoding -> agent
nomination -> (shield) -> world step -> reward. Every step writes one trace
row; episode metrics are derived from the rows so the table can be rebuilt
from ``episodes.jsonl`` alone.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from .belief_filter import ObservationHistory, RecurrentModel, load_recurrent_model
from .config import Config, save_run_manifest
from .dynamics_model import DynamicsModel, load_dynamics_model
from .errors import ConfigError, MissingModelError
from .geometry import point_rect_distance
from .render import plot_training_curve
from .report import table_frame, write_excel_table
from .rl_agent import (ACTIONS, BRAKE_ACTION, DQNAgent, Transition, epsilon_schedule, load_q_network,
                       save_q_network, select_action)
from .safety_shield import WorldView, analytic_dynamics, filter_action
from .state_encoder import encode_state_tensor
from .supervised import progress_enabled
from .tensor_nn import NetworkParams
from .world_sim import (IntersectionLayout, WorldState, apply_noise, build_layout, compute_reward,
                        reset, step, ttc_throttle)

logger = logging.getLogger(__name__)

OUTCOMES = ("success", "collision", "timeout", "speed-violation")


# ============================================================
# Variants and models
# ============================================================

@dataclass(frozen=True)
class AgentVariant:
    name: str
    use_belief_filter: bool
    use_shield: bool
    learned: bool = True


VARIANTS = {
    "rule-based": AgentVariant("rule-based", False, False, learned=False),
    "rl": AgentVariant("rl", False, False),
    "belief-update": AgentVariant("belief-update", True, False),
    "collision-detector": AgentVariant("collision-detector", False, True),
    "srl": AgentVariant("srl", True, True),
}


def get_variant(name: str) -> AgentVariant:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant '{name}', expected one of {list(VARIANTS)}")
    return VARIANTS[name]


@dataclass(frozen=True, eq=False)
class ModelSet:
    q_net: Optional[NetworkParams] = None
    belief: Optional[RecurrentModel] = None
    future: Optional[RecurrentModel] = None
    dynamics: Optional[DynamicsModel] = None


def q_checkpoint_name(variant: str) -> str:
    return f"q_{variant}.sdqn"


def required_checkpoints(variant: AgentVariant, config: Config, include_q: bool = True) -> dict:
    """Checkpoint file name per ModelSet field the variant needs under ``config``."""
    needed = {}
    if variant.learned and include_q:
        needed["q_net"] = q_checkpoint_name(variant.name)
    if variant.use_belief_filter:
        needed["belief"] = "belief.sdqn"
    if variant.use_shield and not config.shield.ground_truth:
        needed["future"] = "future.sdqn"
    if variant.use_shield and config.shield.use_trained_dynamics:
        needed["dynamics"] = "dynamics.sdqn"
    return needed


def load_models(variant: AgentVariant, model_dir, config: Config, include_q: bool = True) -> ModelSet:
    """
    Load every checkpoint the variant needs.

    Raises:
        MissingModelError: a required checkpoint does not exist
    """
    model_dir = Path(model_dir)
    loaded = {}
    for slot, name in required_checkpoints(variant, config, include_q).items():
        path = model_dir / name
        if not path.exists():
            raise MissingModelError(path)
        if slot == "q_net":
            loaded[slot] = load_q_network(path, config.roi, config.agent)
        elif slot == "dynamics":
            loaded[slot] = load_dynamics_model(path)
        else:
            loaded[slot] = load_recurrent_model(path, config.models.hidden_units)
        logger.debug("loaded %s from %s", slot, path)
    return ModelSet(**loaded)


def episode_seed(base_seed: int, index: int) -> int:
    """Independent 64-bit seed per (base seed, episode index)."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, np.uint64)[0])


# ============================================================
# Episode
# ============================================================

@dataclass(frozen=True)
class EpisodeMetrics:
    episode: int
    seed: int
    variant: str
    layout: str
    outcome: str
    speed_violation: bool
    steps: int
    crossing_time: float
    avg_speed: float
    min_distance: float
    avg_distance: float
    shield_interventions: int
    episode_return: float


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    metrics: EpisodeMetrics
    rows: list
    losses: list = field(default_factory=list)


def _finite_or_none(value):
    value = float(value)
    return value if math.isfinite(value) else None


class Perception:
    """Noisy sensing, observation history and optional belief update for one episode."""

    def __init__(self, config: Config, belief: Optional[RecurrentModel], rng: np.random.Generator):
        self.config = config
        self.belief = belief
        self.rng = rng
        self.history = ObservationHistory()

    def observe(self, world: WorldState):
        """
        Returns:
            tuple: (state tensor, noisy observation, windows (K, 3, 4), perceived (K, 4))
        """
        obs = apply_noise(world, self.rng, self.config.noise)
        self.history.update(obs.ids, obs.position, obs.speed, obs.heading)
        windows = self.history.windows(obs.ids)
        if self.belief is not None and len(obs):
            perceived = self.belief.perceive_array(windows)
        else:
            perceived = np.column_stack([obs.position.reshape(-1, 2), obs.speed, obs.heading])
        state = encode_state_tensor(perceived[:, 0:2], perceived[:, 2], perceived[:, 3], world.ego,
                                    self.config.roi)
        return state, obs, windows, perceived


def shield_view(world: WorldState, obs, windows, perceived, models: ModelSet, config: Config) -> WorldView:
    """What the shield checks against: ground truth or perceived positions with model predictions."""
    route = world.layout.route
    horizon = config.shield.virtual_steps * config.shield.virtual_dt
    if config.shield.ground_truth:
        crowd = world.crowd
        rad = np.deg2rad(crowd.heading)
        velocity = np.column_stack([np.cos(rad), np.sin(rad)]) * crowd.speed[:, None]
        return WorldView(world.ego, route, crowd.ids, crowd.position.copy(),
                         crowd.position + velocity * horizon)
    if len(obs) == 0:
        empty = np.zeros((0, 2))
        return WorldView(world.ego, route, obs.ids, empty, empty)
    return WorldView(world.ego, route, obs.ids, perceived[:, 0:2].copy(), models.future.predict(windows))


def _trace_row(index: int, seed: int, variant: str, world: WorldState, nxt: WorldState, nominated: float,
               executed: float, action, decision, reward) -> dict:
    ego, events, crowd = nxt.ego, nxt.events, nxt.crowd
    gaps = point_rect_distance(crowd.position, ego.position, ego.heading) if len(crowd) else np.zeros(0)
    prediction = decision.prediction if decision is not None else None
    return {
        "episode": index,
        "seed": seed,
        "variant": variant,
        "layout": world.layout.kind,
        "step": int(nxt.step_index),
        "time": float(nxt.time),
        "x": float(ego.x),
        "y": float(ego.y),
        "heading": float(ego.heading),
        "speed": float(ego.speed),
        "route_s": float(ego.route_s),
        "nominated": float(nominated),
        "executed": float(executed),
        "action": action,
        "intervened": bool(decision.intervened) if decision is not None else False,
        "shield_step": prediction.step if prediction is not None else None,
        "shield_pedestrian": prediction.pedestrian if prediction is not None else None,
        "shield_min_distance": _finite_or_none(prediction.min_distance) if prediction is not None else None,
        "reward": float(reward.reward),
        "branch": reward.branch,
        "min_distance": float(gaps.min()) if len(gaps) else None,
        "pedestrians": [[int(i), float(p[0]), float(p[1])] for i, p in zip(crowd.ids, crowd.position)],
        "collision": bool(events.collision),
        "goal": bool(events.goal),
        "timeout": bool(events.timeout),
        "speed_violation": bool(events.speed_violation),
        "outcome": reward.outcome,
    }


def metrics_from_rows(rows: list) -> EpisodeMetrics:
    """Episode metrics derived only from trace rows."""
    first, last = rows[0], rows[-1]
    violated = any(r["speed_violation"] for r in rows)
    if last["collision"]:
        outcome = "collision"
    elif last["timeout"] or not last["goal"]:
        outcome = "timeout"
    else:
        outcome = "speed-violation" if violated else "success"
    distances = [r["min_distance"] for r in rows if r["min_distance"] is not None]
    return EpisodeMetrics(
        episode=int(first["episode"]),
        seed=int(first["seed"]),
        variant=first["variant"],
        layout=first["layout"],
        outcome=outcome,
        speed_violation=violated,
        steps=len(rows),
        crossing_time=float(last["time"]),
        avg_speed=float(np.mean([r["speed"] for r in rows])),
        min_distance=float(min(distances)) if distances else float("nan"),
        avg_distance=float(np.mean(distances)) if distances else float("nan"),
        shield_interventions=sum(1 for r in rows if r["intervened"]),
        episode_return=float(sum(r["reward"] for r in rows)),
    )


def run_episode(variant: AgentVariant, layout: IntersectionLayout, models: ModelSet, seed: int, config: Config,
                learner: Optional[DQNAgent] = None, epsilon: float = 0.0, index: int = 0,
                world: Optional[WorldState] = None) -> EpisodeResult:
    """
    Play one episode to its terminal step.

    With a ``learner`` the online net of the learner acts epsilon-greedily and
    every transition (with the executed action) is stored and learned from.

    Raises:
        MissingModelError: a model the variant needs is absent from ``models``
    """
    q_net = learner.online if learner is not None else models.q_net
    if variant.learned and q_net is None:
        raise MissingModelError(q_checkpoint_name(variant.name))
    if variant.use_belief_filter and models.belief is None:
        raise MissingModelError("belief.sdqn")
    if variant.use_shield and not config.shield.ground_truth and models.future is None:
        raise MissingModelError("future.sdqn")
    if variant.use_shield and config.shield.use_trained_dynamics and models.dynamics is None:
        raise MissingModelError("dynamics.sdqn")
    dynamics = models.dynamics.step if (variant.use_shield and config.shield.use_trained_dynamics) \
        else analytic_dynamics(config.shield)

    world = world if world is not None else reset(layout, seed)
    perception = Perception(config, models.belief if variant.use_belief_filter else None,
                            np.random.default_rng([seed, 1]))
    policy_rng = np.random.default_rng([seed, 2])
    rows, losses = [], []

    state, obs, windows, perceived = perception.observe(world)
    while True:
        if variant.learned:
            action = select_action(state, world.ego.speed, q_net, epsilon, policy_rng)
            nominated = ACTIONS[action]
        else:
            action = None
            nominated = ttc_throttle(world.ego, obs.position, obs.speed, obs.heading, config.reward)

        decision = None
        executed = nominated
        if variant.use_shield:
            view = shield_view(world, obs, windows, perceived, models, config)
            decision = filter_action(nominated, view, dynamics, config.shield)
            executed = decision.executed
            if decision.intervened and action is not None:
                action = BRAKE_ACTION

        nxt, _ = step(world, executed, speed_limit=config.reward.v2)
        reward = compute_reward(world, nxt, config.reward)
        rows.append(_trace_row(index, seed, variant.name, world, nxt, nominated, executed, action,
                               decision, reward))
        next_state, obs, windows, perceived = perception.observe(nxt)

        if learner is not None:
            learner.remember(Transition.from_tensors(state, world.ego.speed, action, reward.reward,
                                                     next_state, nxt.ego.speed, reward.terminal))
            learner.observe_step()
            loss = learner.learn()
            if loss is not None:
                losses.append(loss)
            q_net = learner.online

        world, state = nxt, next_state
        if reward.terminal:
            break

    metrics = metrics_from_rows(rows)
    if learner is not None:
        learner.end_episode(metrics.steps)
    logger.info("episode %d (%s): %s after %.2f s, %d interventions", index, variant.name, metrics.outcome,
                 metrics.crossing_time, metrics.shield_interventions)
    return EpisodeResult(metrics=metrics, rows=rows, losses=losses)


# ============================================================
# Aggregation
# ============================================================

def table_row(metrics: list, variant: str, layout: str) -> dict:
    """Comparison-table row: outcome percentages and means (crossing time/speed over successes)."""
    n = len(metrics)
    outcomes = [m.outcome for m in metrics]
    success = [m for m in metrics if m.outcome == "success"]
    distances = [m.avg_distance for m in metrics if not math.isnan(m.avg_distance)]

    def pct(count):
        return 100.0 * count / n if n else float("nan")

    return {
        "agent": variant,
        "layout": layout,
        "episodes": n,
        "success_pct": pct(outcomes.count("success")),
        "collision_pct": pct(outcomes.count("collision")),
        "timeout_pct": pct(outcomes.count("timeout")),
        "speed_violation_pct": pct(sum(1 for m in metrics if m.speed_violation)),
        "crossing_time_s": float(np.mean([m.crossing_time for m in success])) if success else float("nan"),
        "crossing_speed_mps": float(np.mean([m.avg_speed for m in success])) if success else float("nan"),
        "avg_distance_m": float(np.mean(distances)) if distances else float("nan"),
    }


def aggregate_from_traces(path) -> list:
    """Rebuild table rows (one per variant and layout) from an ``episodes.jsonl`` file."""
    episodes = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                episodes.setdefault((row["variant"], row["layout"], row["episode"]), []).append(row)
    grouped = {}
    for (variant, layout, index), rows in sorted(episodes.items()):
        grouped.setdefault((variant, layout), []).append(metrics_from_rows(rows))
    return [table_row(metrics, variant, layout) for (variant, layout), metrics in grouped.items()]


def write_trace(rows_by_episode, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rows in rows_by_episode:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def metrics_frame(metrics: list) -> pd.DataFrame:
    return pd.DataFrame([asdict(m) for m in metrics])


# ============================================================
# Experiments
# ============================================================

@dataclass(frozen=True, eq=False)
class ExperimentResult:
    row: dict
    metrics: list
    rows: list


def run_experiment(variant: AgentVariant, layout: IntersectionLayout, models: ModelSet, config: Config,
                   episodes: Optional[int] = None, base_seed: Optional[int] = None,
                   workers: Optional[int] = None) -> ExperimentResult:
    """Evaluate ``episodes`` independent greedy episodes across worker threads."""
    episodes = config.eval.episodes if episodes is None else episodes
    base_seed = config.seed if base_seed is None else base_seed
    workers = max(1, config.eval.workers if workers is None else workers)

    def play(index):
        return run_episode(variant, layout, models, episode_seed(base_seed, index), config, index=index)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(tqdm(pool.map(play, range(episodes)), total=episodes, desc=f"eval {variant.name}",
                            disable=not progress_enabled()))
    metrics = [r.metrics for r in results]
    row = table_row(metrics, variant.name, layout.kind)
    logger.info("%s on %s: success %.1f%%, collision %.1f%%, timeout %.1f%%, speed violation %.1f%%",
                variant.name, layout.kind, row["success_pct"], row["collision_pct"], row["timeout_pct"],
                row["speed_violation_pct"])
    return ExperimentResult(row=row, metrics=metrics, rows=[r.rows for r in results])


def write_experiment(results: list, out_dir, config: Config) -> dict:
    """Write metrics.csv, table.csv, table.xlsx, episodes.jsonl and run.json for finished experiments."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out_dir / "metrics.csv",
        "table": out_dir / "table.csv",
        "excel": out_dir / "table.xlsx",
        "trace": out_dir / "episodes.jsonl",
        "manifest": out_dir / "run.json",
    }
    metrics_frame([m for r in results for m in r.metrics]).to_csv(paths["metrics"], index=False)
    table_rows = [r.row for r in results]
    table_frame(table_rows).to_csv(paths["table"], index=False)
    write_trace([rows for r in results for rows in r.rows], paths["trace"])
    notes = {"Layout": ", ".join(sorted({r.row["layout"] for r in results})), "Seed": config.seed,
             "Profile": config.profile, "Shield mode": "ground truth" if config.shield.ground_truth else "perceived"}
    write_excel_table(table_rows, paths["excel"], notes=notes)
    save_run_manifest(config, paths["manifest"], {"outputs": {k: v.name for k, v in paths.items()}})
    return paths


def run_comparison(layout: IntersectionLayout, model_dir, config: Config, variants=None,
                   episodes: Optional[int] = None) -> list:
    """Every variant on one layout with the same episode seeds."""
    results = []
    for name in variants or VARIANTS:
        variant = get_variant(name)
        models = load_models(variant, model_dir, config)
        results.append(run_experiment(variant, layout, models, config, episodes))
    return results


SHIELDED_VARIANTS = ("collision-detector", "srl")
COLLISION_ORDER = ("rule-based", "rl", "belief-update", "srl")


@dataclass(frozen=True)
class Claim:
    name: str
    passed: bool
    detail: str


def comparison_claims(rows: list, config: Config) -> list:
    """
    Directional checks over comparison-table rows of one layout.

    Shielded variants must record no collisions with a ground-truth shield and
    at most ``eval.noisy_collision_pct`` with a perceived one. Collision rates
    must order rule-based > rl >= belief-update >= srl, and srl must have the
    highest success rate. A claim is skipped when a variant it names is absent.
    """
    by_agent = {r["agent"]: r for r in rows}
    claims = []
    limit = 0.0 if config.shield.ground_truth else config.eval.noisy_collision_pct
    for name in SHIELDED_VARIANTS:
        if name in by_agent:
            pct = by_agent[name]["collision_pct"]
            claims.append(Claim(f"{name} collisions", pct <= limit, f"{pct:.1f}% (limit {limit:.1f}%)"))

    if all(name in by_agent for name in COLLISION_ORDER):
        rates = [by_agent[name]["collision_pct"] for name in COLLISION_ORDER]
        ordered = rates[0] > rates[1] >= rates[2] >= rates[3]
        detail = ", ".join(f"{n} {r:.1f}%" for n, r in zip(COLLISION_ORDER, rates))
        claims.append(Claim("collision ordering", ordered, detail))

    if "srl" in by_agent and len(by_agent) > 1:
        best = max(by_agent.values(), key=lambda r: r["success_pct"])
        srl = by_agent["srl"]["success_pct"]
        claims.append(Claim("srl success is highest", srl >= best["success_pct"],
                            f"srl {srl:.1f}%, best {best['agent']} {best['success_pct']:.1f}%"))
    for claim in claims:
        log = logger.info if claim.passed else logger.warning
        log("claim %s: %s (%s)", claim.name, "holds" if claim.passed else "FAILS", claim.detail)
    return claims


# ============================================================
# Training
# ============================================================

TRAINING_LOG_COLUMNS = ["episode", "steps", "return", "epsilon", "beta", "loss_mean", "shield_interventions",
                        "outcome"]


def train_agent(variant: AgentVariant, layout: IntersectionLayout, models: ModelSet, config: Config,
                out_dir, seed: Optional[int] = None, episodes: Optional[int] = None):
    """
    DDQN/PER training of one learning variant; the pipeline (belief, shield) is active during training.

    Writes ``q_<variant>.sdqn``, periodic checkpoints, ``training.csv`` and ``training.png``.

    Returns:
        tuple: (online network, training log DataFrame)
    """
    if not variant.learned:
        raise ConfigError(f"variant '{variant.name}' has no learned policy to train")
    seed = config.seed if seed is None else seed
    episodes = config.agent.episodes if episodes is None else episodes
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    learner = DQNAgent(config.agent, config.roi, seed)
    learner.beta.episodes = episodes
    log = []
    for ep in tqdm(range(episodes), desc=f"train {variant.name}", disable=not progress_enabled()):
        epsilon = epsilon_schedule(ep, config.agent)
        beta = learner.beta.value
        result = run_episode(variant, layout, models, episode_seed(seed, ep), config, learner=learner,
                             epsilon=epsilon, index=ep)
        m = result.metrics
        log.append({"episode": ep, "steps": m.steps, "return": m.episode_return, "epsilon": epsilon,
                    "beta": beta, "loss_mean": float(np.mean(result.losses)) if result.losses else float("nan"),
                    "shield_interventions": m.shield_interventions, "outcome": m.outcome})
        logger.info("episode %d: %s in %d steps, return %.3f, epsilon %.3f", ep, m.outcome, m.steps,
                    m.episode_return, epsilon)
        if (ep + 1) % config.agent.checkpoint_every == 0:
            save_q_network(learner.online, ckpt_dir / f"q_{variant.name}_ep{ep + 1:04d}.sdqn")

    save_q_network(learner.online, out_dir / q_checkpoint_name(variant.name))
    frame = pd.DataFrame(log, columns=TRAINING_LOG_COLUMNS)
    frame.to_csv(out_dir / "training.csv", index=False)
    if len(frame):
        plot_training_curve(frame, out_dir / "training.png")
    save_run_manifest(config, out_dir / "run.json", {"variant": variant.name, "layout": layout.kind,
                                                      "episodes": episodes, "target_syncs": learner.target_syncs})
    return learner.online, frame


def layout_for(config: Config, kind: Optional[str] = None) -> IntersectionLayout:
    """The configured junction, with any ``layout.*`` dimension overrides applied."""
    return build_layout(kind or config.layout, **config.geometry.overrides())
