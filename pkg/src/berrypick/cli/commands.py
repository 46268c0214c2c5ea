import argparse
from importlib import resources
from pathlib import Path

import numpy as np
from loguru import logger
from rich.console import Console
from rich.table import Table

from ..config import RootConfig, config_hash, save_config
from ..core.env import VecReachEnv, env_generators, trace_record, unstack_state
from ..core.kinematics import ArmModel
from ..core.metrics import (
    SuccessRecord,
    analyze_segment,
    reach_success_rate,
    success_rates,
    summarize_segments,
)
from ..core.networks import policy_forward
from ..core.ppo import gradcheck, train
from ..core.simulation import run_simulation
from ..errors import UsageError
from ..utils.io import (
    Checkpoint,
    ensure_dir,
    load_checkpoint,
    read_detections,
    read_success_records,
    read_trajectory_csv,
    save_checkpoint,
    target_to_dict,
    write_frame,
    write_json,
    write_jsonl,
    write_learning_curve,
    write_success_records,
    write_trajectory_csv,
)
from .theme import GREEN, RED, YELLOW

commands = ["train", "eval", "simulate", "analyze", "gradcheck"]

BUNDLED_STREAM = "three_berries.jsonl"
TABLE_METRICS = ("duration", "straight_distance", "traj_length", "mean_speed", "rms_jerk")


def bundled_stream_path() -> Path:
    return Path(str(resources.files("berrypick.data").joinpath(BUNDLED_STREAM)))


def _echo_config(config: RootConfig, out_dir: Path):
    save_config(config, out_dir / "config.toml")


def _load_actor(path: Path, config: RootConfig) -> Checkpoint:
    checkpoint = load_checkpoint(path)
    if checkpoint.config_hash != config_hash(config):
        logger.warning(f"{path} was trained with a different config ({checkpoint.config_hash[:12]})")
    return checkpoint


def cmd_train(config: RootConfig, out_dir: Path, console: Console) -> int:
    out_dir = ensure_dir(out_dir)
    ckpt_dir = ensure_dir(out_dir / "checkpoints")
    _echo_config(config, out_dir)
    digest = config_hash(config)
    model = ArmModel.from_config(config.arm)

    def on_checkpoint(iteration, actor, critic):
        save_checkpoint(
            ckpt_dir / f"ckpt_{iteration:05d}.json",
            Checkpoint(actor=actor, critic=critic, iteration=iteration, config_hash=digest),
        )

    with console.status("Training..."):
        result = train(config.env, config.ppo, model, on_checkpoint=on_checkpoint)
    write_learning_curve(out_dir / "learning_curve.csv", result.curve)
    if result.curve:
        last = result.curve[-1]
        console.print(
            f"Trained {last.iteration} iteration(s); mean final distance "
            f"{last.mean_final_distance:.4f} m",
            style=GREEN,
        )
    else:
        console.print("No iterations configured; wrote the initial checkpoint only", style=YELLOW)
    return 0


def evaluate_policy(
    checkpoint: Checkpoint, config: RootConfig, episodes: int
) -> tuple[dict, list[dict]]:
    """Deterministic (mean-action) rollouts of full episodes.

    Returns the report and the per-step trace of the first episode.
    """
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    model = ArmModel.from_config(config.arm)
    seed = int(np.random.SeedSequence(config.seed).spawn(3)[2].generate_state(1)[0])
    env = VecReachEnv(config.env, model, episodes, rngs=env_generators(seed, episodes))
    obs = env.reset()
    eps_r = config.metrics.reach_tolerance
    reached = np.zeros(episodes, dtype=bool)
    final = np.zeros(episodes)
    trace = []
    for t in range(config.env.horizon):
        mean, _ = policy_forward(checkpoint.actor, obs)
        obs, _, dones, info = env.step(mean)
        trace.append(trace_record(t, unstack_state(info["state"], 0), info["components"][0]))
        reached |= info["distance"] <= eps_r
        if np.all(dones):
            final = info["final_distance"]
    records = [
        SuccessRecord(attempt_id=i, final_distance=float(d), reached_in_time=bool(r))
        for i, (d, r) in enumerate(zip(final, reached))
    ]
    report = {
        "episodes": episodes,
        "checkpoint_iteration": checkpoint.iteration,
        "eps_r": eps_r,
        "mean_final_distance": float(np.mean(final)),
        "reach_rate": reach_success_rate(records, eps_r),
        "final_distances": [float(d) for d in final],
    }
    return report, trace


def cmd_eval(
    config: RootConfig, out_dir: Path, checkpoint_path: Path, episodes: int, console: Console
) -> int:
    out_dir = ensure_dir(out_dir)
    _echo_config(config, out_dir)
    checkpoint = _load_actor(checkpoint_path, config)
    with console.status("Evaluating..."):
        report, trace = evaluate_policy(checkpoint, config, episodes)
    write_json(out_dir / "eval_report.json", report)
    write_jsonl(out_dir / "eval_trace.jsonl", trace)
    console.print(
        f"{episodes} episode(s): mean final distance {report['mean_final_distance']:.4f} m, "
        f"reach rate {report['reach_rate']:.1f}% at {report['eps_r'] * 100:.0f} cm"
    )
    return 0


def _summary_table(summary: dict) -> Table:
    table = Table(title="Harvest summary")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key, value in summary.items():
        if isinstance(value, float):
            value = f"{value:.1f}"
        table.add_row(key, "-" if value is None else str(value))
    return table


def _metrics_table(frame) -> Table:
    table = Table(title="Motion metrics (mean ± std)")
    table.add_column("segment")
    table.add_column("n", justify="right")
    for name in TABLE_METRICS:
        table.add_column(name, justify="right")
    for _, row in frame.iterrows():
        table.add_row(
            str(row["segment"]),
            str(row["count"]),
            *(
                f"{row[f'{name}_mean']:.3f} ± {row[f'{name}_std']:.3f}"
                for name in TABLE_METRICS
            ),
        )
    return table


def cmd_simulate(
    config: RootConfig,
    out_dir: Path,
    checkpoint_path: Path,
    stream_path: Path | None,
    console: Console,
) -> int:
    out_dir = ensure_dir(out_dir)
    _echo_config(config, out_dir)
    checkpoint = _load_actor(checkpoint_path, config)
    detections = read_detections(stream_path or bundled_stream_path())
    result = run_simulation(config, checkpoint.actor, detections)

    write_jsonl(out_dir / "targets.jsonl", (target_to_dict(t) for t in result.targets))
    write_jsonl(out_dir / "phase_audit.jsonl", (vars(e) for e in result.audit))
    write_jsonl(
        out_dir / "gripper.jsonl", ({"stamp": t, "action": a} for t, a in result.gripper_log)
    )
    write_jsonl(out_dir / "commands.jsonl", result.commands)
    write_trajectory_csv(out_dir / "trajectory.csv", result.trajectories)
    write_success_records(out_dir / "attempts.jsonl", result.records)
    report = summarize_segments(result.metrics)
    write_frame(out_dir / "metrics.csv", report)
    summary = result.summary(config.metrics.reach_tolerance)
    write_json(out_dir / "summary.json", summary)

    console.print(_summary_table(summary))
    if not report.empty:
        console.print(_metrics_table(report))
    if result.error is not None:
        raise result.error
    return 0


def cmd_analyze(
    config: RootConfig,
    out_dir: Path,
    trajectory_csv: Path,
    console: Console,
    attempts: Path | None = None,
) -> int:
    out_dir = ensure_dir(out_dir)
    _echo_config(config, out_dir)
    logs = read_trajectory_csv(trajectory_csv)
    rows = [(log.label, analyze_segment(log, config.metrics)) for log in logs]
    report = summarize_segments(rows)
    write_frame(out_dir / "metrics.csv", report)
    if report.empty:
        console.print("No segments in input; wrote an empty report", style=YELLOW)
    else:
        console.print(_metrics_table(report))
    if attempts is not None:
        records = read_success_records(attempts)
        rates = {"attempts": len(records), **success_rates(records, config.metrics.reach_tolerance)}
        write_json(out_dir / "success_rates.json", rates)
        console.print(_summary_table(rates))
    return 0


def cmd_gradcheck(
    config: RootConfig, out_dir: Path, instances: int, corrupt: str | None, console: Console
) -> int:
    out_dir = ensure_dir(out_dir)
    _echo_config(config, out_dir)
    report = gradcheck(config.ppo, seed=config.seed, instances=instances, corrupt=corrupt)
    write_json(out_dir / "gradcheck.json", vars(report))
    style = GREEN if report.passed else RED
    console.print(
        f"gradcheck {'PASSED' if report.passed else 'FAILED'}: {report.instances} instances, "
        f"max relative error {report.max_relative_error:.3e} in {report.worst_parameter or '-'}",
        style=style,
    )
    return 0 if report.passed else 1


def handle_command(args: argparse.Namespace, config: RootConfig, console: Console) -> int:
    """Dispatch a parsed command line to its handler."""
    logger.debug(f"Handling command: {args.command}")
    out_dir = Path(args.out)
    if args.command == "train":
        return cmd_train(config, out_dir, console)
    if args.command == "eval":
        return cmd_eval(config, out_dir, Path(args.checkpoint), args.episodes, console)
    if args.command == "simulate":
        stream = Path(args.stream) if args.stream else None
        return cmd_simulate(config, out_dir, Path(args.checkpoint), stream, console)
    if args.command == "analyze":
        attempts = Path(args.attempts) if args.attempts else None
        return cmd_analyze(config, out_dir, Path(args.trajectory_csv), console, attempts)
    if args.command == "gradcheck":
        return cmd_gradcheck(config, out_dir, args.instances, args.corrupt, console)
    raise UsageError(f"unknown command: {args.command}")
