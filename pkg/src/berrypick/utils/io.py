"""Line-delimited JSON, CSV and checkpoint persistence."""

import dataclasses
import json
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from ..core.metrics import SuccessRecord, TrajectoryLog
from ..core.models import ACTION_DIM, OBS_DIM, DetectionRecord, TargetPoint
from ..core.networks import DenseLayer, MlpParams
from ..core.ppo import IterationStats
from ..errors import DataError, StorageError

CHECKPOINT_FORMAT_VERSION = 1
TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "segment_label"]
DETECTION_KEYS = ("frame", "stamp", "u", "v", "depth", "quality")


def ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create output directory {path}: {e}") from e
    return path


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def _read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def write_jsonl(path: Path, rows: Iterable[dict]):
    _write_text(path, "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows))


def read_jsonl(path: Path) -> list[tuple[int, dict]]:
    """(line number, object) pairs; blank lines are skipped."""
    rows = []
    for lineno, line in enumerate(_read_text(path).splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        rows.append((lineno, obj))
    return rows


def write_json(path: Path, obj: dict):
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: Path) -> dict:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno} ({e.msg})") from e


def read_detections(path: Path) -> list[DetectionRecord]:
    """One detection per line: {frame, stamp, u, v, depth, quality}."""
    records = []
    for lineno, obj in read_jsonl(path):
        missing = [k for k in DETECTION_KEYS if k not in obj]
        if missing:
            raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
        try:
            records.append(
                DetectionRecord(
                    frame_id=int(obj["frame"]),
                    **{k: float(obj[k]) for k in DETECTION_KEYS if k != "frame"},
                )
            )
        except (TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    logger.debug(f"Read {len(records)} detections from {path}")
    return records


def target_to_dict(target: TargetPoint) -> dict:
    x, y, z = (float(c) for c in target.position)
    return {"stamp": target.stamp, "track": target.track_id, "x": x, "y": y, "z": z}


def read_success_records(path: Path) -> list[SuccessRecord]:
    records = []
    for lineno, obj in read_jsonl(path):
        try:
            records.append(SuccessRecord(**obj))
        except TypeError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
        except DataError as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return records


def write_success_records(path: Path, records: Iterable[SuccessRecord]):
    write_jsonl(path, (dataclasses.asdict(r) for r in records))


def write_learning_curve(path: Path, curve: list[IterationStats]):
    columns = [f.name for f in dataclasses.fields(IterationStats)]
    frame = pd.DataFrame([dataclasses.asdict(s) for s in curve], columns=columns)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def write_frame(path: Path, frame: pd.DataFrame):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    logger.info(f"Wrote {path}")


def read_trajectory_csv(path: Path) -> list[TrajectoryLog]:
    """Split a trajectory CSV into one log per segment.

    Columns t, x, y, z, segment_label and an optional segment_id. Without
    segment_id a new segment starts whenever the label changes. Errors carry
    the 1-based file line number (the header is line 1).
    """
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        return []
    except pd.errors.ParserError as e:
        raise DataError(f"{path}: {e}") from e
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e

    missing = [c for c in TRAJECTORY_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
    if frame.empty:
        return []

    numeric = frame[["t", "x", "y", "z"]].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.fillna(0.0)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataError(f"{path}:{row + 2}: malformed row {frame.iloc[row].tolist()}")
    if (frame["segment_label"] == "").any():
        row = int(np.flatnonzero((frame["segment_label"] == "").to_numpy())[0])
        raise DataError(f"{path}:{row + 2}: empty segment_label")

    if "segment_id" in frame.columns:
        keys = frame["segment_id"]
    else:
        keys = (frame["segment_label"] != frame["segment_label"].shift()).cumsum()

    logs = []
    for _, index in frame.groupby(keys, sort=False).groups.items():
        rows = numeric.loc[index]
        label = frame.loc[index[0], "segment_label"]
        try:
            logs.append(
                TrajectoryLog(
                    times=rows["t"].to_numpy(),
                    positions=rows[["x", "y", "z"]].to_numpy(),
                    label=label,
                )
            )
        except DataError as e:
            raise DataError(f"{path}: line {int(index[0]) + 2}: {e}") from e
    logger.debug(f"Read {len(logs)} segment(s) from {path}")
    return logs


def write_trajectory_csv(path: Path, logs: Iterable[TrajectoryLog]):
    frames = [
        pd.DataFrame(
            {
                "t": log.times,
                "x": log.positions[:, 0],
                "y": log.positions[:, 1],
                "z": log.positions[:, 2],
                "segment_label": log.label,
                "segment_id": k,
            }
        )
        for k, log in enumerate(logs)
    ]
    frame = (
        pd.concat(frames, ignore_index=True)
        if frames
        else pd.DataFrame(columns=TRAJECTORY_COLUMNS + ["segment_id"])
    )
    write_frame(path, frame)


@dataclass(frozen=True)
class Checkpoint:
    actor: MlpParams
    critic: MlpParams | None
    iteration: int
    config_hash: str
    format_version: int = CHECKPOINT_FORMAT_VERSION


def _params_to_dict(params: MlpParams) -> dict:
    out = {
        "layers": [
            {
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "weight": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in params.layers
        ]
    }
    if params.log_std is not None:
        out["log_std"] = params.log_std.tolist()
    return out


def _params_from_dict(data: dict, where: str, output_dim: int) -> MlpParams:
    layers = []
    expected_in = OBS_DIM
    for i, layer in enumerate(data["layers"]):
        rows, cols = layer["shape"]
        if rows != expected_in:
            raise DataError(
                f"{where}.layers[{i}]: expects {rows} inputs but the previous layer "
                f"provides {expected_in}"
            )
        weight = np.asarray(layer["weight"], dtype=float)
        bias = np.asarray(layer["bias"], dtype=float)
        if weight.size != rows * cols or bias.shape != (cols,):
            raise DataError(f"{where}.layers[{i}]: array sizes do not match shape {rows}x{cols}")
        layers.append(DenseLayer(weight.reshape(rows, cols), bias, layer["activation"]))
        expected_in = cols
    if expected_in != output_dim:
        raise DataError(f"{where}: output size {expected_in}, expected {output_dim}")
    log_std = None
    if "log_std" in data:
        log_std = np.asarray(data["log_std"], dtype=float)
        if log_std.shape != (output_dim,):
            raise DataError(f"{where}.log_std: expected {output_dim} entries")
    return MlpParams(layers=tuple(layers), log_std=log_std)


def checkpoint_to_dict(checkpoint: Checkpoint) -> dict:
    data = {
        "format_version": checkpoint.format_version,
        "iteration": checkpoint.iteration,
        "config_hash": checkpoint.config_hash,
        "actor": _params_to_dict(checkpoint.actor),
    }
    if checkpoint.critic is not None:
        data["critic"] = _params_to_dict(checkpoint.critic)
    return data


def save_checkpoint(path: Path, checkpoint: Checkpoint):
    write_json(path, checkpoint_to_dict(checkpoint))


def load_checkpoint(path: Path) -> Checkpoint:
    """Load and check that the layer shapes chain from the observation
    layout to the action (actor) or value (critic) output."""
    data = read_json(path)
    try:
        if data["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise DataError(
                f"{path}: unsupported checkpoint format {data['format_version']}"
            )
        actor = _params_from_dict(data["actor"], "actor", ACTION_DIM)
        if actor.log_std is None:
            raise DataError(f"{path}: actor is missing log_std")
        critic = _params_from_dict(data["critic"], "critic", 1) if "critic" in data else None
        return Checkpoint(
            actor=actor,
            critic=critic,
            iteration=int(data["iteration"]),
            config_hash=str(data["config_hash"]),
            format_version=int(data["format_version"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint ({e!r})") from e
