"""
actorloop command line: train, offline-train, eval, make-dataset, plot
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np

from config import ALGORITHMS, load_config
from errors import ActorLoopError

logger = logging.getLogger(__name__)

# flag dest -> configuration key
CONFIG_FLAGS = {
    "agent": "algorithm",
    "env": "env_name",
    "env_size": "env_size",
    "episode_cap": "episode_cap",
    "mode": "mode",
    "num_actors": "num_actors",
    "steps": "total_actor_steps",
    "spi": "samples_per_insert",
    "batch_size": "batch_size",
    "capacity": "replay_capacity",
    "seed": "seed",
    "logdir": "logdir",
    "eval_period": "eval_period",
    "checkpoint_period": "checkpoint_period",
    "eval_episodes": "eval_episodes",
    "demo_file": "demo_file",
}


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--agent", choices=ALGORITHMS, help="algorithm")
    parser.add_argument("--env", help="environment name")
    parser.add_argument("--env-size", type=int, help="environment size parameter")
    parser.add_argument("--episode-cap", type=int, help="maximum episode length")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--logdir")
    parser.add_argument("--eval-period", type=int)
    parser.add_argument("--eval-episodes", type=int)
    parser.add_argument("--checkpoint-period", type=int)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actorloop", description="Actor/learner reinforcement learning runs")
    parser.add_argument("--log-level", default=os.environ.get("ACTORLOOP_LOG_LEVEL", "INFO"),
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train an agent online")
    _add_common(train)
    train.add_argument("--mode", choices=["single_process", "distributed"])
    train.add_argument("--num-actors", type=int)
    train.add_argument("--steps", type=int, help="actor step budget")
    train.add_argument("--spi", type=float, help="samples per insert")
    train.add_argument("--capacity", type=int, help="replay capacity")
    train.add_argument("--demo-file", help="demonstration dataset for dqfd/r2d3")

    offline = commands.add_parser("offline-train", help="train a learner from a dataset file")
    _add_common(offline)
    offline.add_argument("--dataset", required=True)
    offline.add_argument("--learner-steps", type=int, required=True)
    offline.add_argument("--no-eval", action="store_true", help="skip evaluation episodes")

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    _add_common(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, default=10)

    dataset = commands.add_parser("make-dataset", help="record episodes into a dataset file")
    _add_common(dataset)
    dataset.add_argument("--policy", choices=["oracle", "random", "mixed", "checkpoint"], default="oracle")
    dataset.add_argument("--episodes", type=int, default=10)
    dataset.add_argument("--checkpoint")
    dataset.add_argument("--output", required=True)

    plot = commands.add_parser("plot", help="aggregate run logs into curve data and an SVG chart")
    plot.add_argument("runs", nargs="+", help="run directories or log.csv files")
    plot.add_argument("--x-axis", choices=["actor_steps", "learner_walltime"], default="actor_steps")
    plot.add_argument("--output", default="curve.svg")
    return parser


def _overrides(args: argparse.Namespace, parser: argparse.ArgumentParser) -> Dict[str, object]:
    overrides = {}
    for dest, key in CONFIG_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _run_command(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if args.command == "plot":
        from plotting import plot_runs
        curves = plot_runs(args.runs, args.output, args.x_axis)
        print(f"{len(curves)} points written to {os.path.splitext(args.output)[0]}.svg")
        return 0

    import runtime
    config = load_config(args.config, _overrides(args, parser))
    if args.command == "train":
        logdir = config.logdir
        summary = runtime.run(config, logdir)
        print(f"actor_steps={summary.actor_steps} learner_steps={summary.learner_steps} "
              f"episodes={summary.episodes} log={summary.log_path}")
    elif args.command == "offline-train":
        summary = runtime.run_offline(config, args.dataset, args.learner_steps, config.logdir,
                                      evaluate_policy=not args.no_eval)
        final = summary.eval_returns[-1] if summary.eval_returns else float("nan")
        print(f"learner_steps={summary.learner_steps} final_eval_return={final:.4f}")
    elif args.command == "eval":
        returns = runtime.evaluate_checkpoint(config, args.checkpoint, args.episodes)
        print(f"episodes={len(returns)} mean_return={np.mean(returns):.4f}")
    elif args.command == "make-dataset":
        stats = runtime.make_dataset_file(config, args.output, args.policy, args.episodes, args.checkpoint)
        print(f"episodes={len(stats)} mean_return={stats['episode_return'].mean():.4f} output={args.output}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run_command(args, parser)
    except (ActorLoopError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
