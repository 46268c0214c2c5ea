"""From policy displacements to timed joint commands, and harvest sequencing."""

import math
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from berrypick.config import StreamerConfig
from berrypick.core.models import (
    JOINT_COUNT,
    HarvestEvent,
    HarvestPhase,
    StreamCommand,
    TargetPoint,
)
from berrypick.errors import DomainError, ProtocolError


def time_parameterize(delta_q, vel_max, min_duration: float = 0.0) -> float:
    """Shortest duration that keeps every joint within its velocity limit."""
    delta_q = np.asarray(delta_q, dtype=float)
    vel_max = np.asarray(vel_max, dtype=float)
    if not np.all(np.isfinite(delta_q)):
        raise DomainError("joint displacement contains non-finite values")
    if not np.all(vel_max > 0):
        raise DomainError("velocity limits must be positive")
    duration = float(np.max(np.abs(delta_q) / vel_max))
    if duration == 0.0:
        return 0.0
    return max(duration, min_duration)


@dataclass(frozen=True)
class Halt:
    demand: float
    distance: float


@dataclass
class HaltMonitor:
    """Latched halt state for one reach."""

    engaged: bool = False
    recent_demands: deque = field(default_factory=lambda: deque(maxlen=16))

    def reset(self):
        self.engaged = False
        self.recent_demands.clear()


def stream_step(
    delta_q,
    ee_distance_to_target: float,
    config: StreamerConfig,
    monitor: HaltMonitor,
) -> StreamCommand | Halt | None:
    """Timed command, a halt, or None when there is no motion to send."""
    if monitor.engaged:
        return Halt(demand=0.0, distance=ee_distance_to_target)
    delta_q = np.asarray(delta_q, dtype=float)
    duration = time_parameterize(delta_q, config.vel_max, config.min_command_duration)
    if duration == 0.0:
        return None
    demand = float(np.linalg.norm(delta_q) / duration)
    monitor.recent_demands.append(demand)
    if (
        ee_distance_to_target <= config.convergence_radius
        and demand > config.halt_demand_threshold
    ):
        monitor.engaged = True
        logger.debug(
            f"halt engaged: demand {demand:.3f} rad/s at {ee_distance_to_target * 1000:.1f} mm"
        )
        return Halt(demand=demand, distance=ee_distance_to_target)
    return StreamCommand(delta_q=delta_q, duration=duration)


def execute_command(
    q: np.ndarray, command: StreamCommand, sample_dt: float
) -> list[tuple[float, np.ndarray]]:
    """Linear joint-space execution sampled every `sample_dt` (end included)."""
    steps = max(1, int(np.ceil(command.duration / sample_dt - 1e-9)))
    q = np.asarray(q, dtype=float)
    return [
        (command.duration * k / steps, q + command.delta_q * (k / steps))
        for k in range(1, steps + 1)
    ]


@dataclass
class HarvestPlan:
    targets: list[TargetPoint]
    home_q: np.ndarray
    basket_position: np.ndarray


def plan_harvest(
    targets: Sequence[TargetPoint],
    ee_position,
    home_q=None,
    basket_position=None,
) -> HarvestPlan:
    """Nearest-first ordering; stable for equal distances."""
    ee = np.asarray(ee_position, dtype=float)
    # math.dist rescales, so offsets whose squares underflow still order
    ordered = sorted(targets, key=lambda t: math.dist(t.position, ee))
    return HarvestPlan(
        targets=ordered,
        home_q=np.zeros(JOINT_COUNT) if home_q is None else np.asarray(home_q, dtype=float),
        basket_position=(
            np.zeros(3) if basket_position is None else np.asarray(basket_position, dtype=float)
        ),
    )


P, E = HarvestPhase, HarvestEvent
TRANSITIONS: dict[tuple[HarvestPhase, HarvestEvent], HarvestPhase] = {
    (P.HOME, E.BEGIN_SCAN): P.SCAN,
    # the first scan happens at the home pose
    (P.HOME, E.TARGETS_FOUND): P.REACH,
    (P.HOME, E.NO_TARGETS): P.DONE,
    (P.SCAN, E.TARGETS_FOUND): P.REACH,
    (P.SCAN, E.NO_TARGETS): P.DONE,
    (P.REACH, E.REACHED): P.GRASP,
    (P.REACH, E.REACH_FAILED): P.RESCAN,
    (P.GRASP, E.GRASPED): P.PULL,
    (P.PULL, E.DETACHED): P.TRANSFER,
    # a missed pull or transfer opens the gripper where the arm stopped
    (P.PULL, E.PULL_MISSED): P.RELEASE,
    (P.TRANSFER, E.AT_BASKET): P.RELEASE,
    (P.TRANSFER, E.TRANSFER_MISSED): P.RELEASE,
    (P.RELEASE, E.TARGETS_REMAINING): P.REACH,
    (P.RELEASE, E.LIST_EXHAUSTED): P.RESCAN,
    (P.RESCAN, E.BEGIN_SCAN): P.SCAN,
}

GRIPPER_EVENTS = {P.GRASP: "gripper_close", P.RELEASE: "gripper_open"}


def advance_phase(phase: HarvestPhase, event: HarvestEvent) -> HarvestPhase:
    try:
        return TRANSITIONS[(phase, event)]
    except KeyError:
        raise ProtocolError(
            f"event '{event.value}' is not valid in phase '{phase.value}'"
        ) from None


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    stamp: float
    source: str
    target: str
    event: str
    note: str = ""


class HarvestMachine:
    """Single-owner phase machine with an audit trail and gripper side-events."""

    def __init__(self):
        self.phase = HarvestPhase.HOME
        self.audit: list[AuditEntry] = []
        self.gripper_log: list[tuple[float, str]] = []

    def fire(self, event: HarvestEvent, stamp: float = 0.0, note: str = "") -> HarvestPhase:
        new_phase = advance_phase(self.phase, event)
        self.audit.append(
            AuditEntry(
                seq=len(self.audit),
                stamp=stamp,
                source=self.phase.value,
                target=new_phase.value,
                event=event.value,
                note=note,
            )
        )
        logger.debug(f"{self.phase.value} --{event.value}--> {new_phase.value}")
        self.phase = new_phase
        if new_phase in GRIPPER_EVENTS:
            self.gripper_log.append((stamp, GRIPPER_EVENTS[new_phase]))
        return new_phase

    def note(self, stamp: float, event: str, note: str):
        """Audit entry without a transition (skips, stage errors)."""
        self.audit.append(
            AuditEntry(
                seq=len(self.audit),
                stamp=stamp,
                source=self.phase.value,
                target=self.phase.value,
                event=event,
                note=note,
            )
        )
