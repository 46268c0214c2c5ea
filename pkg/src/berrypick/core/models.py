"""Value types shared across the pipeline.

Quaternions use the scalar-last (x, y, z, w) order of
`scipy.spatial.transform.Rotation`.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

JOINT_COUNT = 6
OBS_DIM = 25
ACTION_DIM = 6


@dataclass(frozen=True)
class EEPose:
    position: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True)
class PoseCommand:
    position: np.ndarray
    orientation: np.ndarray


@dataclass(frozen=True)
class JointLimits:
    pos_min: np.ndarray
    pos_max: np.ndarray
    vel_max: np.ndarray


@dataclass(frozen=True)
class DetectionRecord:
    frame_id: int
    stamp: float
    u: float
    v: float
    depth: float
    quality: float


@dataclass(frozen=True)
class TargetPoint:
    position: np.ndarray
    track_id: int
    stamp: float


@dataclass(frozen=True)
class StreamCommand:
    delta_q: np.ndarray
    duration: float


class HarvestPhase(Enum):
    HOME = "home"
    SCAN = "scan"
    REACH = "reach"
    GRASP = "grasp"
    PULL = "pull"
    TRANSFER = "transfer"
    RELEASE = "release"
    RESCAN = "rescan"
    DONE = "done"


class HarvestEvent(Enum):
    BEGIN_SCAN = "begin_scan"
    TARGETS_FOUND = "targets_found"
    NO_TARGETS = "no_targets"
    REACHED = "reached_within_tolerance"
    REACH_FAILED = "reach_failed"
    GRASPED = "grasped"
    DETACHED = "detached"
    PULL_MISSED = "pull_missed"
    AT_BASKET = "at_basket"
    TRANSFER_MISSED = "transfer_missed"
    TARGETS_REMAINING = "targets_remaining"
    LIST_EXHAUSTED = "list_exhausted"


class Segment(Enum):
    """Motion primitives logged for analysis."""

    HOME_TO_STRAWBERRY = "Home->Strawberry"
    PULL = "Pull"
    STRAWBERRY_TO_BASKET = "Strawberry->Basket"
    RETURN_HOME = "Return->Home"
