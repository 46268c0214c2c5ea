import dataclasses

import numpy as np
import pytest

from berrypick.cli.commands import bundled_stream_path
from berrypick.config import MetricsConfig, PpoConfig, RootConfig
from berrypick.core.env import EnvState, step
from berrypick.core.models import HarvestEvent, HarvestPhase, Segment, TargetPoint
from berrypick.core.networks import MlpParams
from berrypick.core.perception import (
    CameraIntrinsics,
    ExtrinsicCalibration,
    SyntheticScene,
    synthesize_stream,
)
from berrypick.core.ppo import init_actor_critic
from berrypick.core.simulation import HarvestSimulator, SimulationResult, run_simulation
from berrypick.core.streamer import TRANSITIONS
from berrypick.utils.io import read_detections

LOOSE = dataclasses.replace(RootConfig(), metrics=MetricsConfig(reach_tolerance=1.0))


def phase_sequence(result: SimulationResult) -> list[str]:
    """Phases entered, in order, starting from home."""
    # notes (skips, halts, stage errors) leave the phase unchanged
    return ["home"] + [e.target for e in result.audit if e.source != e.target]


def still_actor() -> MlpParams:
    """Policy whose mean action is always zero: the arm holds its home pose."""
    actor, _ = init_actor_critic(np.random.default_rng(0), PpoConfig(hidden_sizes=(8,)))
    return actor.zeros_like()


def constant_actor(action) -> MlpParams:
    actor = still_actor()
    arrays = actor.arrays()
    arrays[-2] = np.asarray(action, dtype=float)  # output bias
    return actor.with_arrays(arrays)


def _assert_follows_phase_graph(result):
    phase = HarvestPhase.HOME
    for entry in result.audit:
        if entry.source == entry.target:
            continue
        assert entry.source == phase.value
        phase = TRANSITIONS[(phase, HarvestEvent(entry.event))]
        assert entry.target == phase.value


def test_empty_stream_finishes_without_attempts():
    result = run_simulation(RootConfig(), still_actor(), [])
    assert phase_sequence(result) == ["home", "scan", "done"]
    assert result.records == [] and result.metrics == []
    summary = result.summary(0.02)
    assert summary["attempts"] == 0 and summary["harvest_rate"] is None


def test_bundled_stream_harvests_three_berries():
    result = run_simulation(LOOSE, still_actor(), read_detections(bundled_stream_path()))
    phases = phase_sequence(result)
    assert phases.count("reach") == 3
    assert phases[-1] == "done"
    _assert_follows_phase_graph(result)
    assert [a for _, a in result.gripper_log] == ["gripper_close", "gripper_open"] * 3
    summary = result.summary(1.0)
    assert summary["targets_localized"] == 3
    assert summary["reach_rate"] == summary["harvest_rate"] == 100.0
    assert result.error is None


def test_failed_reaches_rescan_until_the_scan_limit():
    result = run_simulation(RootConfig(), still_actor(), read_detections(bundled_stream_path()))
    assert len(result.records) == 3
    assert not any(r.reached_in_time for r in result.records)
    assert result.scans == RootConfig().simulation.max_scans
    assert phase_sequence(result).count("rescan") == 3
    assert any(e.event == "scan_limit" for e in result.audit)
    assert result.gripper_log == []
    _assert_follows_phase_graph(result)


def test_out_of_workspace_berry_is_skipped_by_name():
    config = RootConfig().perception
    intr = CameraIntrinsics.from_config(config)
    calib = ExtrinsicCalibration.from_config(config)
    scene = SyntheticScene(berries=((-0.65, -0.15, 0.55), (-0.45, -0.15, 0.55)))
    detections = synthesize_stream(scene, intr, calib, np.random.default_rng(0))
    result = run_simulation(LOOSE, still_actor(), detections)
    assert result.skipped == [1]
    skip = [e for e in result.audit if e.event == "target_skipped"]
    assert len(skip) == 1 and "track 1" in skip[0].note
    assert len(result.records) == 1 and result.records[0].deposited


def test_policy_motion_logs_feasible_commands():
    sim = HarvestSimulator(RootConfig(), constant_actor([0.6, -0.4, 0.3, 0.0, 0.2, 0.0]))
    goal = np.array([-0.8, -0.3, 0.45])
    motion = sim.policy_motion(goal, Segment.HOME_TO_STRAWBERRY)
    assert not motion.halted
    commands = sim.result.commands
    assert commands
    vel_max = np.asarray(RootConfig().streamer.vel_max)
    for c in commands:
        assert c["duration"] >= RootConfig().streamer.min_command_duration
        assert np.all(c["duration"] * vel_max >= np.abs(c["delta_q"]) - 1e-12)
    log = sim.result.trajectories[0]
    assert log.label == "Home->Strawberry"
    assert np.all(np.diff(log.times) > 0)


def test_large_command_near_goal_halts_the_reach():
    sim = HarvestSimulator(RootConfig(), constant_actor([1.0, 0, 0, 0, 0, 0]))
    goal = sim.ee_position + np.array([0.025, 0.0, 0.0])
    motion = sim.policy_motion(goal, Segment.HOME_TO_STRAWBERRY)
    assert motion.halted and not motion.reached
    assert sim.result.halts == 1
    assert sim.result.commands == []
    assert sim.result.audit[-1].event == "halt"


@pytest.mark.parametrize("seed", [0, 1])
def test_simulation_is_deterministic(seed):
    detections = read_detections(bundled_stream_path())
    actor = constant_actor([0.3, -0.2, 0.1, 0.0, 0.0, 0.0])
    a = run_simulation(RootConfig().with_seed(seed), actor, detections)
    b = run_simulation(RootConfig().with_seed(seed), actor, detections)
    assert a.commands == b.commands
    assert [vars(e) for e in a.audit] == [vars(e) for e in b.audit]


def _at_reach(config: RootConfig) -> HarvestSimulator:
    sim = HarvestSimulator(config, still_actor())
    sim.machine.fire(HarvestEvent.BEGIN_SCAN)
    sim.machine.fire(HarvestEvent.TARGETS_FOUND)
    return sim


def test_missed_pull_is_not_counted_as_detached():
    sim = _at_reach(RootConfig())
    assert sim.harvest_one(TargetPoint(position=sim.ee_position, track_id=0, stamp=0.0))
    (record,) = sim.result.records
    assert record.reached_in_time and record.grasped
    assert not record.detached and not record.deposited
    assert [e.event for e in sim.result.audit][-3:] == [
        "reached_within_tolerance", "grasped", "pull_missed",
    ]
    assert sim.machine.phase is HarvestPhase.RELEASE
    assert [a for _, a in sim.result.gripper_log] == ["gripper_close", "gripper_open"]
    summary = sim.result.summary(0.02)
    assert summary["reach_rate"] == 100.0
    assert summary["grasp_pull_rate"] == summary["harvest_rate"] == 0.0


def test_missed_transfer_is_detached_but_not_deposited():
    # the pull goal (0.10 m) is within tolerance, the basket (~0.15 m) is not
    config = dataclasses.replace(RootConfig(), metrics=MetricsConfig(reach_tolerance=0.12))
    sim = _at_reach(config)
    sim.harvest_one(TargetPoint(position=sim.ee_position, track_id=0, stamp=0.0))
    (record,) = sim.result.records
    assert record.detached and not record.deposited
    assert sim.result.audit[-1].event == "transfer_missed"
    summary = sim.result.summary(0.12)
    assert summary["grasp_pull_rate"] == 100.0
    assert summary["harvest_rate"] == 0.0


def test_policy_step_tracks_joints_like_the_training_env():
    config = RootConfig()
    sim = HarvestSimulator(config, constant_actor([0.01, 0.0, 0.0, 0.0, 0.0, 0.0]))
    state = EnvState(
        q=sim.model.q_default.copy(),
        qdot=np.zeros(6),
        a_prev=np.zeros(6),
        cmd_position=np.array([-0.7, -0.2, 0.55]),
        cmd_orientation=sim.nominal,
        step=0,
    )
    action, q_next, qdot = sim.policy_step(state)
    expected, _, _, _ = step(state, action, config.env, sim.model)
    np.testing.assert_array_equal(q_next, expected.q)
    np.testing.assert_array_equal(qdot, expected.qdot)
    # the small target is reached in the first sub-step, so the last one is still
    assert qdot[0] == 0.0
