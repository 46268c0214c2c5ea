"""Detection records to smoothed robot-frame targets.

Pipeline per detection: gate -> back-project -> associate to the nearest
track in the image plane -> push into the track's buffer -> once the buffer
holds `buffer_size` points, emit their mean mapped into the robot frame.
"""

from collections import deque
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from loguru import logger

from berrypick.config import PerceptionConfig, rigid_transform_problem
from berrypick.core.models import DetectionRecord, TargetPoint
from berrypick.errors import ConfigError, StreamError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("perception.fx/fy: focal lengths must be positive")

    @classmethod
    def from_config(cls, config: PerceptionConfig) -> "CameraIntrinsics":
        return cls(config.fx, config.fy, config.cx, config.cy, config.width, config.height)


@dataclass(frozen=True)
class ExtrinsicCalibration:
    T: np.ndarray

    def __post_init__(self):
        problem = rigid_transform_problem(self.T)
        if problem is not None:
            raise ConfigError(f"perception.extrinsic: {problem}")
        object.__setattr__(self, "T", np.asarray(self.T, dtype=float))

    @classmethod
    def from_config(cls, config: PerceptionConfig) -> "ExtrinsicCalibration":
        return cls(np.asarray(config.extrinsic, dtype=float))


class GateReason(Enum):
    LOW_QUALITY = "low_quality"
    INVALID_DEPTH = "invalid_depth"
    OUT_OF_IMAGE = "out_of_image"


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    reason: GateReason | None = None


def backproject(intr: CameraIntrinsics, u: float, v: float, Z: float) -> np.ndarray | None:
    """Pinhole back-projection; None for an invalid depth."""
    if not (np.isfinite(Z) and Z > 0 and np.isfinite(u) and np.isfinite(v)):
        return None
    return np.array([(u - intr.cx) * Z / intr.fx, (v - intr.cy) * Z / intr.fy, Z])


def project(intr: CameraIntrinsics, p: np.ndarray) -> tuple[float, float]:
    X, Y, Z = np.asarray(p, dtype=float)
    return intr.fx * X / Z + intr.cx, intr.fy * Y / Z + intr.cy


def gate_detection(
    det: DetectionRecord,
    min_quality: float = 0.75,
    depth_range: tuple[float, float] = (0.1, 2.0),
    intr: CameraIntrinsics | None = None,
) -> GateDecision:
    # either condition rejects; quality exactly at the threshold is rejected
    if not det.quality > min_quality:
        return GateDecision(False, GateReason.LOW_QUALITY)
    lo, hi = depth_range
    if not (np.isfinite(det.depth) and lo <= det.depth <= hi):
        return GateDecision(False, GateReason.INVALID_DEPTH)
    if intr is not None and not (0 <= det.u < intr.width and 0 <= det.v < intr.height):
        return GateDecision(False, GateReason.OUT_OF_IMAGE)
    return GateDecision(True)


@dataclass
class Track:
    id: int
    last_center: tuple[float, float]
    buffer: deque = field(default_factory=deque)
    misses: int = 0


def associate(
    tracks: Iterable[Track], det: DetectionRecord, tau_p: float
) -> tuple[Track | None, float]:
    """Nearest track in pixel space, ties broken by lower id.

    Returns (None, distance) when no track is closer than tau_p.
    """
    best, best_key = None, None
    for track in tracks:
        dist = float(np.hypot(det.u - track.last_center[0], det.v - track.last_center[1]))
        key = (dist, track.id)
        if best_key is None or key < best_key:
            best, best_key = track, key
    if best is None or not best_key[0] < tau_p:
        return None, (np.inf if best_key is None else best_key[0])
    return best, best_key[0]


def push_and_smooth(track: Track, p: np.ndarray, buffer_size: int) -> np.ndarray | None:
    """Append to the sliding window; the window mean once it is full."""
    if track.buffer.maxlen != buffer_size:
        track.buffer = deque(track.buffer, maxlen=buffer_size)
    track.buffer.append(np.asarray(p, dtype=float))
    if len(track.buffer) < buffer_size:
        return None
    return np.mean(np.stack(track.buffer), axis=0)


def to_robot_frame(calib: ExtrinsicCalibration, p_cam: np.ndarray) -> np.ndarray:
    return (calib.T @ np.append(np.asarray(p_cam, dtype=float), 1.0))[:3]


class TargetTracker:
    """Owns the track table of one detection stream."""

    def __init__(
        self,
        intr: CameraIntrinsics,
        calib: ExtrinsicCalibration,
        config: PerceptionConfig,
    ):
        self.intr = intr
        self.calib = calib
        self.config = config
        self.tracks: dict[int, Track] = {}
        self.next_id = 0
        self.last_stamp = -np.inf
        self.rejected: dict[GateReason, int] = {reason: 0 for reason in GateReason}

    def _process_frame(self, frame: list[DetectionRecord]) -> list[TargetPoint]:
        targets = []
        matched: set[int] = set()
        for det in frame:
            decision = gate_detection(
                det,
                self.config.min_quality,
                (self.config.depth_min, self.config.depth_max),
                self.intr,
            )
            if not decision.accepted:
                self.rejected[decision.reason] += 1
                logger.debug(f"frame {det.frame_id}: rejected ({decision.reason.value})")
                continue
            p_cam = backproject(self.intr, det.u, det.v, det.depth)
            track, _ = associate(self.tracks.values(), det, self.config.tau_p)
            if track is None:
                track = Track(
                    id=self.next_id,
                    last_center=(det.u, det.v),
                    buffer=deque(maxlen=self.config.buffer_size),
                )
                self.tracks[track.id] = track
                self.next_id += 1
                logger.debug(f"frame {det.frame_id}: new track {track.id}")
            track.last_center = (det.u, det.v)
            track.misses = 0
            matched.add(track.id)
            mean = push_and_smooth(track, p_cam, self.config.buffer_size)
            if mean is not None:
                targets.append(
                    TargetPoint(
                        position=to_robot_frame(self.calib, mean),
                        track_id=track.id,
                        stamp=det.stamp,
                    )
                )
        for track_id in list(self.tracks):
            if track_id in matched:
                continue
            track = self.tracks[track_id]
            track.misses += 1
            if track.misses >= self.config.max_misses:
                logger.debug(f"retiring track {track_id} after {track.misses} misses")
                del self.tracks[track_id]
        return targets

    def process(self, detections: Iterable[DetectionRecord]) -> Iterator[TargetPoint]:
        frame: list[DetectionRecord] = []
        for det in detections:
            if det.stamp < self.last_stamp:
                raise StreamError(
                    f"detection stamps out of order: {det.stamp} after {self.last_stamp}"
                )
            self.last_stamp = det.stamp
            if frame and det.frame_id != frame[0].frame_id:
                yield from self._process_frame(frame)
                frame = []
            frame.append(det)
        if frame:
            yield from self._process_frame(frame)


def process_stream(
    detections: Iterable[DetectionRecord],
    intr: CameraIntrinsics,
    calib: ExtrinsicCalibration,
    config: PerceptionConfig,
) -> list[TargetPoint]:
    return list(TargetTracker(intr, calib, config).process(detections))


def latest_targets(targets: Iterable[TargetPoint]) -> list[TargetPoint]:
    """Most recent emission per track, in track-id order."""
    latest: dict[int, TargetPoint] = {}
    for target in targets:
        latest[target.track_id] = target
    return [latest[k] for k in sorted(latest)]


@dataclass(frozen=True)
class SyntheticScene:
    berries: tuple  # robot-frame positions (m)
    frames: int = 20
    fps: float = 30.0
    pixel_noise: float = 0.0
    depth_noise: float = 0.0
    dropout: float = 0.0
    quality_range: tuple = (0.85, 0.98)
    spurious_per_frame: float = 0.0


def synthesize_stream(
    scene: SyntheticScene,
    intr: CameraIntrinsics,
    calib: ExtrinsicCalibration,
    rng: np.random.Generator,
) -> list[DetectionRecord]:
    """Detections of stationary berries seen by the calibrated camera.

    Spurious detections carry a quality below 0.5 so the default gate drops
    them.
    """
    cam_from_robot = np.linalg.inv(calib.T)
    cam_points = [
        (cam_from_robot @ np.append(np.asarray(b, dtype=float), 1.0))[:3] for b in scene.berries
    ]
    records = []
    for frame in range(scene.frames):
        stamp = frame / scene.fps
        for p in cam_points:
            if rng.random() < scene.dropout:
                continue
            u, v = project(intr, p)
            records.append(
                DetectionRecord(
                    frame_id=frame,
                    stamp=stamp,
                    u=float(u + rng.normal(0.0, scene.pixel_noise)) if scene.pixel_noise else float(u),
                    v=float(v + rng.normal(0.0, scene.pixel_noise)) if scene.pixel_noise else float(v),
                    depth=float(p[2] + rng.normal(0.0, scene.depth_noise)) if scene.depth_noise else float(p[2]),
                    quality=float(rng.uniform(*scene.quality_range)),
                )
            )
        for _ in range(rng.poisson(scene.spurious_per_frame)):
            records.append(
                DetectionRecord(
                    frame_id=frame,
                    stamp=stamp,
                    u=float(rng.uniform(0, intr.width)),
                    v=float(rng.uniform(0, intr.height)),
                    depth=float(rng.uniform(0.2, 1.5)),
                    quality=float(rng.uniform(0.1, 0.5)),
                )
            )
    return records
