"""Closed harvesting loop: detections -> targets -> plan -> policy motion.

The kinematic arm executes every streamed command exactly. Gripper actions
are deterministic side-events of the phase machine; a berry counts as
detached when the pull reaches its lowered goal and as deposited when the
transfer reaches the basket.
"""

from dataclasses import dataclass, field

import numpy as np
from loguru import logger

from berrypick.config import RootConfig
from berrypick.core.env import EnvState, build_observation, clamp_action, track_action
from berrypick.core.kinematics import ArmModel, forward_kinematics
from berrypick.core.metrics import (
    SegmentMetrics,
    SuccessRecord,
    TrajectoryLog,
    analyze_segment,
    success_rates,
)
from berrypick.core.models import (
    ACTION_DIM,
    DetectionRecord,
    HarvestEvent,
    Segment,
    StreamCommand,
    TargetPoint,
)
from berrypick.core.networks import MlpParams, policy_forward
from berrypick.core.perception import (
    CameraIntrinsics,
    ExtrinsicCalibration,
    latest_targets,
    process_stream,
)
from berrypick.core.streamer import (
    AuditEntry,
    Halt,
    HaltMonitor,
    HarvestMachine,
    execute_command,
    plan_harvest,
    stream_step,
    time_parameterize,
)
from berrypick.errors import BerrypickError, DataError


@dataclass
class MotionResult:
    q: np.ndarray
    reached: bool
    final_distance: float
    halted: bool = False


@dataclass
class SimulationResult:
    targets: list[TargetPoint] = field(default_factory=list)
    audit: list[AuditEntry] = field(default_factory=list)
    gripper_log: list[tuple[float, str]] = field(default_factory=list)
    commands: list[dict] = field(default_factory=list)
    trajectories: list[TrajectoryLog] = field(default_factory=list)
    records: list[SuccessRecord] = field(default_factory=list)
    metrics: list[tuple[str, SegmentMetrics]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    scans: int = 0
    halts: int = 0
    error: BerrypickError | None = None

    def summary(self, eps_r: float) -> dict:
        return {
            "targets_localized": len(self.targets),
            "targets_skipped": len(self.skipped),
            "attempts": len(self.records),
            "scans": self.scans,
            "halts": self.halts,
            "commands": len(self.commands),
            **success_rates(self.records, eps_r),
            "error": None if self.error is None else str(self.error),
        }


class HarvestSimulator:
    """Runs one harvesting trial on the kinematic arm."""

    def __init__(self, config: RootConfig, actor: MlpParams):
        self.config = config
        self.actor = actor
        self.model = ArmModel.from_config(config.arm)
        self.machine = HarvestMachine()
        self.result = SimulationResult(audit=self.machine.audit, gripper_log=self.machine.gripper_log)
        self.q = self.model.q_default.copy()
        self.clock = 0.0
        self.nominal = np.asarray(config.env.nominal_orientation, dtype=float)
        self.nominal = self.nominal / np.linalg.norm(self.nominal)

    @property
    def ee_position(self) -> np.ndarray:
        return forward_kinematics(self.model, self.q).position

    def _in_workspace(self, p: np.ndarray) -> bool:
        box = self.config.env.workspace
        return bool(np.all(p >= np.asarray(box.min)) and np.all(p <= np.asarray(box.max)))

    def _emit(self, command: StreamCommand, samples: list[tuple[float, np.ndarray]]):
        self.result.commands.append(
            {
                "seq": len(self.result.commands),
                "phase": self.machine.phase.value,
                "stamp": self.clock,
                "delta_q": [float(x) for x in command.delta_q],
                "duration": command.duration,
            }
        )
        start = self.clock
        for tau, q in execute_command(self.q, command, self.config.env.dt):
            samples.append((start + tau, forward_kinematics(self.model, q).position))
        self.q = self.q + command.delta_q
        self.clock = start + command.duration

    def _log_segment(self, segment: Segment, samples: list[tuple[float, np.ndarray]]):
        if len(samples) < 2:
            return
        self.result.trajectories.append(
            TrajectoryLog(
                times=np.array([t for t, _ in samples]),
                positions=np.stack([p for _, p in samples]),
                label=segment.value,
            )
        )

    def policy_step(self, state: EnvState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mean action at `state` and the joint position and velocity it tracks to."""
        mean, _ = policy_forward(self.actor, build_observation(state, self.model))
        action = clamp_action(mean)
        q_next, qdot = track_action(state.q, action, self.config.env, self.model)
        return action, q_next, qdot

    def policy_motion(self, goal: np.ndarray, segment: Segment) -> MotionResult:
        """Drive the arm to `goal` with the deterministic policy mean."""
        tolerance = self.config.metrics.reach_tolerance
        monitor = HaltMonitor()
        samples = [(self.clock, self.ee_position)]
        a_prev = np.zeros(ACTION_DIM)
        qdot = np.zeros_like(self.q)
        distance = float(np.linalg.norm(self.ee_position - goal))
        result = None
        for k in range(self.config.simulation.reach_steps):
            if distance <= tolerance:
                result = MotionResult(self.q, True, distance)
                break
            state = EnvState(self.q, qdot, a_prev, goal, self.nominal, k)
            action, q_next, qdot = self.policy_step(state)
            out = stream_step(q_next - self.q, distance, self.config.streamer, monitor)
            if isinstance(out, Halt):
                self.result.halts += 1
                self.machine.note(
                    self.clock, "halt", f"demand {out.demand:.3f} rad/s at {out.distance:.4f} m"
                )
                result = MotionResult(self.q, False, distance, halted=True)
                break
            if out is not None:
                self._emit(out, samples)
            a_prev = action
            distance = float(np.linalg.norm(self.ee_position - goal))
        if result is None:
            result = MotionResult(self.q, distance <= tolerance, distance)
        self._log_segment(segment, samples)
        return result

    def joint_motion(self, q_goal: np.ndarray, segment: Segment):
        delta = q_goal - self.q
        duration = time_parameterize(
            delta, self.config.streamer.vel_max, self.config.streamer.min_command_duration
        )
        if duration == 0.0:
            return
        samples = [(self.clock, self.ee_position)]
        self._emit(StreamCommand(delta_q=delta, duration=duration), samples)
        self._log_segment(segment, samples)

    def scan(self, targets: list[TargetPoint], attempted: set[int]) -> list[TargetPoint]:
        """Scan-phase target list: unattempted and inside the workspace."""
        self.result.scans += 1
        candidates = []
        for target in targets:
            if target.track_id in attempted:
                continue
            if not self._in_workspace(target.position):
                attempted.add(target.track_id)
                self.result.skipped.append(target.track_id)
                where = np.array2string(target.position, precision=3)
                logger.warning(f"track {target.track_id} at {where} is outside the workspace")
                self.machine.note(
                    self.clock, "target_skipped", f"track {target.track_id} outside workspace at {where}"
                )
                continue
            candidates.append(target)
        return candidates

    def harvest_one(self, target: TargetPoint) -> bool:
        """Reach, grasp, pull, transfer and release one berry.

        False when the reach fails and the scene has to be re-scanned. A
        missed pull or transfer ends in Release with the gripper opened
        short of the basket.
        """
        E = HarvestEvent
        attempt = len(self.result.records)
        reach = self.policy_motion(target.position, Segment.HOME_TO_STRAWBERRY)
        if not reach.reached:
            logger.warning(
                f"reach to track {target.track_id} failed at {reach.final_distance * 100:.1f} cm"
            )
            self.result.records.append(SuccessRecord(attempt, reach.final_distance, False))
            self.machine.fire(E.REACH_FAILED, self.clock, f"track {target.track_id}")
            return False
        self.machine.fire(E.REACHED, self.clock, f"track {target.track_id}")
        self.machine.fire(E.GRASPED, self.clock)
        pull_goal = target.position - np.array([0.0, 0.0, self.config.streamer.pull_offset])
        pull = self.policy_motion(pull_goal, Segment.PULL)
        transfer = None
        if not pull.reached:
            logger.warning(
                f"pull of track {target.track_id} stopped {pull.final_distance * 100:.1f} cm short"
            )
            self.machine.fire(E.PULL_MISSED, self.clock, f"{pull.final_distance:.4f} m short")
        else:
            self.machine.fire(E.DETACHED, self.clock)
            basket = np.asarray(self.config.streamer.basket_position, dtype=float)
            transfer = self.policy_motion(basket, Segment.STRAWBERRY_TO_BASKET)
            if transfer.reached:
                self.machine.fire(E.AT_BASKET, self.clock)
            else:
                logger.warning(
                    f"track {target.track_id} released "
                    f"{transfer.final_distance * 100:.1f} cm from the basket"
                )
                self.machine.fire(
                    E.TRANSFER_MISSED, self.clock, f"{transfer.final_distance:.4f} m short"
                )
        self.result.records.append(
            SuccessRecord(
                attempt,
                reach.final_distance,
                reached_in_time=True,
                grasped=True,
                detached=pull.reached,
                deposited=transfer is not None and transfer.reached,
            )
        )
        return True

    def run(self, detections: list[DetectionRecord]) -> SimulationResult:
        E = HarvestEvent
        try:
            intr = CameraIntrinsics.from_config(self.config.perception)
            calib = ExtrinsicCalibration.from_config(self.config.perception)
            stream = process_stream(detections, intr, calib, self.config.perception)
            self.result.targets = latest_targets(stream)
            logger.info(f"{len(self.result.targets)} target(s) localized")
            attempted: set[int] = set()
            self.machine.fire(E.BEGIN_SCAN, self.clock)
            while True:
                candidates = []
                if self.result.scans < self.config.simulation.max_scans:
                    candidates = self.scan(self.result.targets, attempted)
                else:
                    self.machine.note(self.clock, "scan_limit", f"{self.result.scans} scans done")
                if not candidates:
                    self.machine.fire(E.NO_TARGETS, self.clock)
                    break
                self.machine.fire(E.TARGETS_FOUND, self.clock, f"{len(candidates)} target(s)")
                remaining = plan_harvest(candidates, self.ee_position).targets
                while remaining:
                    target = remaining.pop(0)
                    attempted.add(target.track_id)
                    if not self.harvest_one(target):
                        break
                    # re-plan from the basket after every release
                    remaining = plan_harvest(remaining, self.ee_position).targets
                    if remaining:
                        self.machine.fire(E.TARGETS_REMAINING, self.clock)
                    else:
                        self.machine.fire(E.LIST_EXHAUSTED, self.clock)
                self.joint_motion(self.model.q_default, Segment.RETURN_HOME)
                self.machine.fire(E.BEGIN_SCAN, self.clock)
        except BerrypickError as e:
            logger.error(f"stage error in phase {self.machine.phase.value}: {e}")
            self.machine.note(self.clock, "stage_error", str(e))
            self.result.error = e
        self._analyze()
        return self.result

    def _analyze(self):
        for log in self.result.trajectories:
            try:
                self.result.metrics.append((log.label, analyze_segment(log, self.config.metrics)))
            except DataError as e:
                logger.debug(f"segment '{log.label}' not analyzed: {e}")


def run_simulation(
    config: RootConfig, actor: MlpParams, detections: list[DetectionRecord]
) -> SimulationResult:
    return HarvestSimulator(config, actor).run(detections)
