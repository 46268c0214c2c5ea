"""Trajectory-quality and task-success analytics."""

from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from berrypick.config import MetricsConfig
from berrypick.errors import DataError

# second-order one-sided third-derivative stencil, forward form
EDGE_STENCIL = np.array([-2.5, 9.0, -12.0, 7.0, -1.5])
MIN_METRIC_SAMPLES = 4


@dataclass(frozen=True)
class TrajectoryLog:
    times: np.ndarray  # (N,) s
    positions: np.ndarray  # (N, 3) m
    label: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        positions = np.asarray(self.positions, dtype=float)
        if times.ndim != 1 or positions.shape != (times.size, 3):
            raise DataError(
                f"segment '{self.label}': expected N timestamps and N x 3 positions, "
                f"got {times.shape} and {positions.shape}"
            )
        if times.size < 2:
            raise DataError(f"segment '{self.label}': need at least 2 samples, got {times.size}")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(positions))):
            raise DataError(f"segment '{self.label}': non-finite samples")
        steps = np.diff(times)
        if np.any(steps == 0):
            i = int(np.argmax(steps == 0)) + 1
            raise DataError(f"segment '{self.label}': duplicate timestamp {times[i]} at sample {i}")
        if np.any(steps < 0):
            i = int(np.argmax(steps < 0)) + 1
            raise DataError(f"segment '{self.label}': timestamps decrease at sample {i}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)


@dataclass(frozen=True)
class UniformSeries:
    times: np.ndarray
    positions: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; the window shrinks symmetrically at the edges."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    half = window // 2
    if half == 0 or n == 0:
        return x.copy()
    out = np.empty_like(x)
    if n >= window:
        out[half : n - half] = sliding_window_view(x, window, axis=0).mean(axis=-1)
    for i in range(min(half, n)):
        for j in (i, n - 1 - i):
            k = min(half, j, n - 1 - j)
            out[j] = x[j - k : j + k + 1].mean(axis=0)
    return out


def resample_and_smooth(log: TrajectoryLog, config: MetricsConfig) -> UniformSeries:
    span = log.times[-1] - log.times[0]
    count = int(np.floor(span * config.resample_rate + 1e-9)) + 1
    grid = log.times[0] + np.arange(count) / config.resample_rate
    resampled = np.column_stack(
        [np.interp(grid, log.times, log.positions[:, axis]) for axis in range(3)]
    )
    return UniformSeries(times=grid, positions=moving_average(resampled, config.ma_window))


def trim_stillness(series: UniformSeries, threshold: float) -> UniformSeries:
    """Drop leading and trailing samples slower than `threshold` (m/s).

    A series that never moves is returned unchanged.
    """
    if series.times.size < 2:
        return series
    speed = np.linalg.norm(np.gradient(series.positions, series.times, axis=0), axis=1)
    moving = np.flatnonzero(speed >= threshold)
    if moving.size == 0:
        return series
    first, last = moving[0], moving[-1]
    return UniformSeries(
        times=series.times[first : last + 1],
        positions=series.positions[first : last + 1],
    )


def _segment_distances(points: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Distance from each point to the closed segment start-end."""
    direction = end - start
    length2 = float(direction @ direction)
    if length2 == 0.0:
        return np.linalg.norm(points - start, axis=1)
    t = np.clip((points - start) @ direction / length2, 0.0, 1.0)
    return np.linalg.norm(points - (start + t[:, None] * direction), axis=1)


def rdp_simplify(points, epsilon: float) -> np.ndarray:
    """Ramer-Douglas-Peucker simplification of an ordered polyline.

    Iterative, so long logs do not hit the recursion limit.
    """
    points = np.asarray(points, dtype=float)
    if points.shape[0] < 2:
        raise DataError("polyline simplification needs at least 2 points")
    if epsilon <= 0 or points.shape[0] == 2:
        return points.copy()
    keep = np.zeros(points.shape[0], dtype=bool)
    keep[[0, -1]] = True
    stack = [(0, points.shape[0] - 1)]
    while stack:
        first, last = stack.pop()
        if last - first < 2:
            continue
        dists = _segment_distances(points[first + 1 : last], points[first], points[last])
        i = int(np.argmax(dists))
        if dists[i] > epsilon:
            index = first + 1 + i
            keep[index] = True
            stack.append((first, index))
            stack.append((index, last))
    return points[keep]


def jerk_profile(positions: np.ndarray, dt: float) -> np.ndarray:
    """Jerk magnitude per sample of a uniformly sampled path.

    Interior samples use the central difference of the compact second
    difference; the two samples at either end use one-sided second-order
    stencils. With fewer than six samples only the plain third difference
    is available, one value per window of four.
    """
    p = np.asarray(positions, dtype=float)
    n = p.shape[0]
    if n < MIN_METRIC_SAMPLES:
        raise DataError(f"jerk needs at least {MIN_METRIC_SAMPLES} samples, got {n}")
    if n < 6:
        return np.linalg.norm(np.diff(p, n=3, axis=0), axis=1) / dt**3
    jerk = np.empty_like(p)
    accel = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt**2
    jerk[2:-2] = (accel[2:] - accel[:-2]) / (2.0 * dt)
    for i in (0, 1):
        jerk[i] = EDGE_STENCIL @ p[i : i + 5] / dt**3
        j = n - 1 - i
        jerk[j] = -EDGE_STENCIL[::-1] @ p[j - 4 : j + 1] / dt**3
    return np.linalg.norm(jerk, axis=1)


@dataclass(frozen=True)
class SegmentMetrics:
    duration: float
    straight_distance: float
    traj_length: float
    mean_speed: float
    rms_jerk: float
    peak_jerk_robust: float


def segment_metrics(
    smoothed: UniformSeries, simplified: np.ndarray, config: MetricsConfig
) -> SegmentMetrics:
    n = smoothed.times.size
    if n < MIN_METRIC_SAMPLES:
        raise DataError(f"segment metrics need at least {MIN_METRIC_SAMPLES} samples, got {n}")
    duration = float(smoothed.times[-1] - smoothed.times[0])
    straight = float(np.linalg.norm(smoothed.positions[-1] - smoothed.positions[0]))
    length = float(np.sum(np.linalg.norm(np.diff(simplified, axis=0), axis=1)))
    jerk = jerk_profile(smoothed.positions, smoothed.dt)
    return SegmentMetrics(
        duration=duration,
        straight_distance=straight,
        traj_length=length,
        mean_speed=length / duration,
        rms_jerk=float(np.sqrt(np.mean(jerk**2))),
        peak_jerk_robust=float(np.percentile(jerk, config.jerk_percentile)),
    )


def analyze_segment(log: TrajectoryLog, config: MetricsConfig) -> SegmentMetrics:
    """Resample, smooth, trim to active motion, simplify, then measure."""
    series = resample_and_smooth(log, config)
    series = trim_stillness(series, config.stillness_threshold)
    simplified = rdp_simplify(series.positions, config.rdp_epsilon)
    return segment_metrics(series, simplified, config)


METRIC_COLUMNS = [f.name for f in fields(SegmentMetrics)]


def summarize_segments(rows: Iterable[tuple[str, SegmentMetrics]]) -> pd.DataFrame:
    """Mean and sample std of every metric per segment label.

    Columns: segment, count, then <metric>_mean / <metric>_std pairs. A
    label seen once gets a std of 0.
    """
    columns = ["segment", "count"] + [
        f"{name}_{stat}" for name in METRIC_COLUMNS for stat in ("mean", "std")
    ]
    records = [{"segment": label, **asdict(m)} for label, m in rows]
    if not records:
        return pd.DataFrame(columns=columns)
    frame = pd.DataFrame.from_records(records)
    grouped = frame.groupby("segment", sort=False)[METRIC_COLUMNS]
    stats = grouped.agg(["mean", "std"]).fillna(0.0)
    stats.columns = [f"{name}_{stat}" for name, stat in stats.columns]
    stats.insert(0, "count", grouped.size())
    return stats.reset_index()[columns]


@dataclass(frozen=True)
class SuccessRecord:
    attempt_id: int
    final_distance: float
    reached_in_time: bool
    grasped: bool = False
    detached: bool = False
    deposited: bool = False

    def __post_init__(self):
        if (self.deposited and not self.detached) or (self.detached and not self.grasped):
            raise DataError(
                f"attempt {self.attempt_id}: stage flags must satisfy "
                "deposited => detached => grasped"
            )
        if not self.final_distance >= 0:
            raise DataError(f"attempt {self.attempt_id}: final_distance must be >= 0")


def _rate(records: Sequence[SuccessRecord], predicate, name: str) -> float:
    if not records:
        raise DataError(f"{name} is undefined for an empty record list")
    return 100.0 * sum(1 for r in records if predicate(r)) / len(records)


def reach_success_rate(records: Sequence[SuccessRecord], eps_r: float = 0.02) -> float:
    return _rate(
        records, lambda r: r.final_distance <= eps_r and r.reached_in_time, "reach success rate"
    )


def grasp_pull_success_rate(records: Sequence[SuccessRecord]) -> float:
    return _rate(records, lambda r: r.grasped and r.detached, "grasp-and-pull success rate")


def harvest_success_rate(records: Sequence[SuccessRecord]) -> float:
    return _rate(
        records, lambda r: r.grasped and r.detached and r.deposited, "harvest success rate"
    )


def success_rates(records: Sequence[SuccessRecord], eps_r: float = 0.02) -> dict:
    """The three stage rates in percent; all None for an empty record list."""
    if not records:
        return {"reach_rate": None, "grasp_pull_rate": None, "harvest_rate": None}
    return {
        "reach_rate": reach_success_rate(records, eps_r),
        "grasp_pull_rate": grasp_pull_success_rate(records),
        "harvest_rate": harvest_success_rate(records),
    }
