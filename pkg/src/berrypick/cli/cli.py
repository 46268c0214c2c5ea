import argparse
import sys
from pathlib import Path

from loguru import logger
from rich.console import Console

from ..config import load_config, resolve_log_level
from ..errors import BerrypickError
from .commands import commands, handle_command
from .theme import RED


def _add_common(parser: argparse.ArgumentParser, default_out: str):
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--out", default=default_out, help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="berrypick",
        description="Reach-policy training, harvest simulation and motion analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(commands) + "}")

    train = sub.add_parser("train", help="train the reaching policy with PPO")
    _add_common(train, "runs/train")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    _add_common(evaluate, "runs/eval")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    evaluate.add_argument("--episodes", type=int, default=100)

    simulate = sub.add_parser("simulate", help="run the closed harvesting loop")
    _add_common(simulate, "runs/simulate")
    simulate.add_argument("--checkpoint", required=True, help="checkpoint JSON")
    simulate.add_argument(
        "--stream", help="detection stream (JSONL); defaults to the bundled 3-berry scene"
    )

    analyze = sub.add_parser("analyze", help="motion metrics of a trajectory CSV")
    _add_common(analyze, "runs/analyze")
    analyze.add_argument("trajectory_csv", help="CSV with t,x,y,z,segment_label")
    analyze.add_argument("--attempts", help="attempt records (JSONL) to score as success rates")

    check = sub.add_parser("gradcheck", help="finite-difference check of the PPO gradients")
    _add_common(check, "runs/gradcheck")
    check.add_argument("--instances", type=int, default=20)
    # test hook: perturb one analytic gradient to exercise the failure path
    check.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def _configure_logging(level: str):
    logger.remove()
    logger.add(sys.stderr, level=level)


def create_cli(argv: list[str] | None = None) -> int:
    """Parse the command line, run the command and return its exit status."""
    console = Console()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = load_config(args.config)
        _configure_logging(resolve_log_level(config))
        if args.seed is not None:
            config = config.with_seed(args.seed)
        return handle_command(args, config, console)
    except BerrypickError as e:
        logger.error(f"{args.command} failed: {e}")
        console.print(f"Error: {e}", style=RED)
        return e.exit_code
