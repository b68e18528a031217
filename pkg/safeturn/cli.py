"""
Command-line entry point.

    python -m safeturn dynamics-fit --out runs/demo
    python -m safeturn belief-train --out runs/demo
    python -m safeturn future-train --out runs/demo
    python -m safeturn train --variant srl --out runs/demo
    python -m safeturn eval --variant srl --layout four-way --episodes 5 --seed 7 --out runs/demo
    python -m safeturn experiment --layout three-way --out runs/demo
    python -m safeturn render --episode-trace runs/demo/episodes.jsonl --out runs/demo
    python -m safeturn selfcheck
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd

from .belief_filter import (PedestrianDataset, collect_pedestrian_dataset, save_recurrent_model,
                            train_belief_model, train_future_model)
from .config import Config, describe_defaults, load_config, save_run_manifest
from .dynamics_model import collect_dynamics_dataset, fit_dynamics_model, save_dynamics_model
from .errors import ConfigError, MissingModelError, NonConvergenceError
from .harness import (VARIANTS, comparison_claims, get_variant, layout_for, load_models, run_comparison,
                      run_experiment, train_agent, write_experiment)
from .render import create_trajectory_figure, read_trace, render_trace, save_figure
from .report import format_table
from .selfcheck import SUITES, run_selfcheck
from .world_sim import LAYOUTS

logger = logging.getLogger("safeturn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_THRESHOLD = 3
DEFAULT_OUT = "runs"


def configure_logging(level: str = "INFO", quiet: bool = False):
    logging.basicConfig(level=logging.WARNING if quiet else getattr(logging, level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s", datefmt="%H:%M:%S",
                        force=True)


def _parse_sets(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _config(args) -> Config:
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "layout", None):
        overrides["layout"] = args.layout
    return load_config(args.config, args.profile, overrides)


def _model_dir(args) -> Path:
    return Path(args.models) if args.models else Path(args.out)


def _pedestrian_dataset(args, config: Config, layout) -> PedestrianDataset:
    if args.dataset:
        return PedestrianDataset.from_frame(pd.read_csv(args.dataset))
    dataset = collect_pedestrian_dataset(layout, config.models.pedestrian_episodes, config.models.pedestrian_steps,
                                         seed=config.seed, noise=config.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.to_frame().to_csv(out / "pedestrians.csv", index=False)
    return dataset


# ============================================================
# Commands
# ============================================================

def _cmd_dynamics_fit(args) -> int:
    config = _config(args)
    layout = layout_for(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = collect_dynamics_dataset(layout, config.models.dynamics_episodes, config.models.dynamics_steps,
                                       seed=config.seed)
    dataset.to_frame().to_csv(out / "dynamics.csv", index=False)
    model, metrics = fit_dynamics_model(dataset, layout, config.models, seed=config.seed, check=not args.no_check)
    save_dynamics_model(model, out / "dynamics.sdqn")
    save_run_manifest(config, out / "dynamics.json", {"metrics": metrics})
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def _cmd_belief_train(args) -> int:
    config = _config(args)
    dataset = _pedestrian_dataset(args, config, layout_for(config))
    model, metrics = train_belief_model(dataset, config.models, seed=config.seed, check=not args.no_check)
    out = Path(args.out)
    save_recurrent_model(model, out / "belief.sdqn")
    save_run_manifest(config, out / "belief.json", {"metrics": metrics})
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def _cmd_future_train(args) -> int:
    config = _config(args)
    dataset = _pedestrian_dataset(args, config, layout_for(config))
    model, metrics = train_future_model(dataset, config.models, seed=config.seed, check=not args.no_check)
    out = Path(args.out)
    save_recurrent_model(model, out / "future.sdqn")
    save_run_manifest(config, out / "future.json", {"metrics": metrics})
    print(json.dumps(metrics, indent=2))
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _config(args)
    variant = get_variant(args.variant)
    models = load_models(variant, _model_dir(args), config, include_q=False)
    _, log = train_agent(variant, layout_for(config), models, config, args.out, episodes=args.episodes)
    if len(log):
        print(log.tail(10).to_string(index=False))
    return EXIT_OK


def _cmd_eval(args) -> int:
    config = _config(args)
    variant = get_variant(args.variant or config.eval.variant)
    models = load_models(variant, _model_dir(args), config)
    result = run_experiment(variant, layout_for(config), models, config, args.episodes, workers=args.workers)
    write_experiment([result], args.out, config)
    print(format_table([result.row]))
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = _config(args)
    variants = args.variants.split(",") if args.variants else None
    results = run_comparison(layout_for(config), _model_dir(args), config, variants, args.episodes)
    write_experiment(results, args.out, config)
    print(format_table([r.row for r in results]))
    if not args.check:
        return EXIT_OK
    claims = comparison_claims([r.row for r in results], config)
    for claim in claims:
        print(f"{claim.name:<28} {'ok' if claim.passed else 'FAILED':<7} {claim.detail}")
    return EXIT_OK if all(c.passed for c in claims) else EXIT_THRESHOLD


def _cmd_render(args) -> int:
    episodes = [int(e) for e in args.episodes.split(",")] if args.episodes else None
    out = Path(args.out)
    count = render_trace(args.episode_trace, out, episodes)
    for (variant, index), rows in read_trace(args.episode_trace).items():
        if episodes is None or index in episodes:
            save_figure(create_trajectory_figure(rows), out / f"trajectory_{variant}_ep{index}.png")
    print(f"{count} frames written under {out / 'frames'}")
    return EXIT_OK


def _cmd_selfcheck(args) -> int:
    config = _config(args)
    results = run_selfcheck(config, args.suite)
    for r in results:
        print(f"{r.name:<12} {'ok' if r.passed else 'FAILED':<7} {r.detail} ({r.seconds:.1f} s)")
    return EXIT_OK if all(r.passed for r in results) else EXIT_THRESHOLD


# ============================================================
# Parser
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="key = value config file (built-in defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="base seed (unsigned 64-bit)")
    common.add_argument("--out", type=str, default=DEFAULT_OUT, help="output directory")
    common.add_argument("--models", type=str, default=None, help="checkpoint directory (defaults to --out)")
    common.add_argument("--profile", choices=["full", "desk"], default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    parser = argparse.ArgumentParser(
        prog="safeturn", description="Safe left-turn agents among pedestrians: training, evaluation, checks.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Built-in configuration defaults:\n" + describe_defaults())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dynamics-fit", parents=[common], help="Collect ego data and fit the dynamics surrogate")
    p.add_argument("--layout", choices=sorted(LAYOUTS))
    p.add_argument("--no-check", action="store_true", help="skip the acceptance thresholds")
    p.set_defaults(func=_cmd_dynamics_fit)

    for name, func, text in (("belief-train", _cmd_belief_train, "Train the belief-update model"),
                             ("future-train", _cmd_future_train, "Train the future-position model")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--layout", choices=sorted(LAYOUTS))
        p.add_argument("--dataset", type=Path, default=None, help="reuse a pedestrians.csv dataset")
        p.add_argument("--no-check", action="store_true", help="skip the acceptance thresholds")
        p.set_defaults(func=func)

    p = sub.add_parser("train", parents=[common], help="DDQN/PER training of one agent variant")
    p.add_argument("--variant", choices=list(VARIANTS), default="srl")
    p.add_argument("--layout", choices=sorted(LAYOUTS))
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", parents=[common], help="Evaluate one variant")
    p.add_argument("--variant", choices=list(VARIANTS), default=None)
    p.add_argument("--layout", choices=sorted(LAYOUTS))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", parents=[common], help="Evaluate all variants on one layout")
    p.add_argument("--layout", choices=sorted(LAYOUTS))
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--variants", type=str, default=None, help="comma-separated subset")
    p.add_argument("--check", action="store_true",
                   help="exit 3 unless shielded variants avoid collisions and the variants order as expected")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("render", parents=[common], help="Draw PPM frames from an episode trace")
    p.add_argument("--episode-trace", type=Path, required=True)
    p.add_argument("--episodes", type=str, default=None, help="comma-separated episode indices")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("selfcheck", parents=[common], help="Run the invariant suites")
    p.add_argument("--suite", action="append", choices=list(SUITES), help="run only these suites")
    p.set_defaults(func=_cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.log_level, args.quiet)
    try:
        return int(args.func(args))
    except (ConfigError, MissingModelError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        logger.error("%s", exc)
        return EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
