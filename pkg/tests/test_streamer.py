import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from berrypick.config import StreamerConfig
from berrypick.core.models import HarvestEvent, HarvestPhase, StreamCommand, TargetPoint
from berrypick.core.streamer import (
    TRANSITIONS,
    Halt,
    HaltMonitor,
    HarvestMachine,
    advance_phase,
    execute_command,
    plan_harvest,
    stream_step,
    time_parameterize,
)
from berrypick.errors import DomainError, ProtocolError

CONFIG = StreamerConfig()
FAR = 0.5
NEAR = 0.01


def test_duration_is_max_ratio():
    assert time_parameterize([0.3, -0.6, 0, 0, 0, 0], np.ones(6)) == pytest.approx(0.6)


def test_zero_motion_has_zero_duration_and_no_command():
    assert time_parameterize(np.zeros(6), np.ones(6), 0.02) == 0.0
    assert stream_step(np.zeros(6), FAR, CONFIG, HaltMonitor()) is None


def test_duration_is_homogeneous():
    dq = np.array([0.1, -0.2, 0.05, 0.3, 0.0, -0.1])
    assert time_parameterize(2 * dq, CONFIG.vel_max) == pytest.approx(
        2 * time_parameterize(dq, CONFIG.vel_max)
    )


def test_duration_floor_applies_to_small_motion():
    assert time_parameterize([1e-4, 0, 0, 0, 0, 0], np.ones(6), 0.02) == 0.02


@pytest.mark.parametrize("dq", [[np.nan, 0, 0, 0, 0, 0], [0, np.inf, 0, 0, 0, 0]])
def test_non_finite_displacement_is_rejected(dq):
    with pytest.raises(DomainError):
        time_parameterize(dq, np.ones(6))


def test_non_positive_velocity_limit_is_rejected():
    with pytest.raises(DomainError):
        time_parameterize(np.ones(6), [1, 1, 0, 1, 1, 1])


def test_random_commands_are_velocity_feasible():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        dq = rng.normal(0.0, 0.5, 6)
        vel = rng.uniform(0.1, 4.0, 6)
        duration = time_parameterize(dq, vel, 0.02)
        assert np.all(duration * vel >= np.abs(dq) - 1e-12)


def test_far_from_target_any_demand_is_streamed():
    command = stream_step([1.0, -1.0, 0.5, 0, 0, 0], FAR, CONFIG, HaltMonitor())
    assert isinstance(command, StreamCommand)
    assert command.duration == pytest.approx(1.0 / 2.0944)


def test_oscillation_near_target_engages_and_latches_halt():
    monitor = HaltMonitor()
    trace = [np.array([0.2, 0, 0, 0, 0, 0]) * (-1) ** k for k in range(10)]
    outputs = [stream_step(dq, NEAR, CONFIG, monitor) for dq in trace]
    assert isinstance(outputs[0], Halt)
    assert outputs[0].demand > CONFIG.halt_demand_threshold
    assert monitor.engaged
    assert all(isinstance(o, Halt) for o in outputs)
    # latched even after moving away
    assert isinstance(stream_step([0.001, 0, 0, 0, 0, 0], FAR, CONFIG, monitor), Halt)
    monitor.reset()
    assert isinstance(stream_step(trace[0], FAR, CONFIG, monitor), StreamCommand)


def test_tiny_residual_commands_pass_near_target():
    monitor = HaltMonitor()
    rng = np.random.default_rng(1)
    for _ in range(50):
        dq = rng.uniform(-1e-3, 1e-3, 6) / np.sqrt(6)
        out = stream_step(dq, NEAR, CONFIG, monitor)
        assert isinstance(out, StreamCommand)
        assert out.duration == CONFIG.min_command_duration
    assert not monitor.engaged
    assert len(monitor.recent_demands) == 16


def test_far_oscillation_then_approach_halts_once_inside_radius():
    monitor = HaltMonitor()
    distances = [0.2, 0.1, 0.05, 0.03, 0.02]
    outputs = [stream_step([0.2, 0, 0, 0, 0, 0], d, CONFIG, monitor) for d in distances]
    assert [type(o).__name__ for o in outputs] == [
        "StreamCommand", "StreamCommand", "StreamCommand", "Halt", "Halt",
    ]


def test_execute_command_interpolates_to_end():
    q0 = np.zeros(6)
    command = StreamCommand(delta_q=np.array([0.3, 0, 0, 0, 0, -0.3]), duration=0.05)
    samples = execute_command(q0, command, 0.02)
    assert len(samples) == 3
    assert samples[-1][0] == pytest.approx(0.05)
    np.testing.assert_allclose(samples[-1][1], command.delta_q)
    np.testing.assert_allclose(samples[0][1], command.delta_q / 3)


def _target(track_id, distance):
    return TargetPoint(position=np.array([distance, 0.0, 0.0]), track_id=track_id, stamp=0.0)


def test_plan_orders_nearest_first():
    plan = plan_harvest([_target(0, 0.9), _target(1, 0.4), _target(2, 0.7)], np.zeros(3))
    assert [t.track_id for t in plan.targets] == [1, 2, 0]


def test_plan_of_nothing_and_of_one():
    assert plan_harvest([], np.zeros(3)).targets == []
    assert [t.track_id for t in plan_harvest([_target(4, 0.2)], np.zeros(3)).targets] == [4]


def test_plan_ties_keep_input_order():
    targets = [_target(3, 0.5), _target(1, -0.5), _target(2, 0.5)]
    assert [t.track_id for t in plan_harvest(targets, np.zeros(3)).targets] == [3, 1, 2]


def test_plan_orders_tiny_offsets():
    targets = [_target(0, 1e-200), _target(1, 0.0), _target(2, -1e-300)]
    assert [t.track_id for t in plan_harvest(targets, np.zeros(3)).targets] == [1, 2, 0]


@given(st.lists(st.floats(-2, 2, allow_nan=False), max_size=12))
@example(xs=[3.685e-177, 0.0])
def test_plan_is_a_permutation(xs):
    targets = [_target(i, x) for i, x in enumerate(xs)]
    plan = plan_harvest(targets, np.zeros(3))
    assert sorted(t.track_id for t in plan.targets) == list(range(len(xs)))
    distances = [abs(t.position[0]) for t in plan.targets]
    assert distances == sorted(distances)


def test_documented_transitions():
    assert advance_phase(HarvestPhase.HOME, HarvestEvent.NO_TARGETS) is HarvestPhase.DONE
    assert advance_phase(HarvestPhase.REACH, HarvestEvent.REACHED) is HarvestPhase.GRASP
    assert advance_phase(HarvestPhase.RELEASE, HarvestEvent.TARGETS_REMAINING) is HarvestPhase.REACH
    assert advance_phase(HarvestPhase.RELEASE, HarvestEvent.LIST_EXHAUSTED) is HarvestPhase.RESCAN


def test_invalid_event_names_phase_and_event():
    with pytest.raises(ProtocolError, match="'grasped'.*'reach'"):
        advance_phase(HarvestPhase.REACH, HarvestEvent.GRASPED)
    with pytest.raises(ProtocolError):
        advance_phase(HarvestPhase.DONE, HarvestEvent.BEGIN_SCAN)


def test_random_event_fuzz_never_skips_reach_or_grasp():
    rng = np.random.default_rng(0)
    events = list(HarvestEvent)
    for _ in range(100_000):
        phase = HarvestPhase.HOME
        for k in rng.integers(0, len(events), size=10):
            event = events[k]
            try:
                new_phase = advance_phase(phase, event)
            except ProtocolError:
                assert (phase, event) not in TRANSITIONS
                continue
            if new_phase is HarvestPhase.GRASP:
                assert phase is HarvestPhase.REACH and event is HarvestEvent.REACHED
            if new_phase is HarvestPhase.PULL:
                assert phase is HarvestPhase.GRASP
            phase = new_phase


def test_three_target_episode_replay():
    machine = HarvestMachine()
    machine.fire(HarvestEvent.BEGIN_SCAN, 0.0)
    machine.fire(HarvestEvent.TARGETS_FOUND, 0.1)
    for i in range(3):
        for event in (
            HarvestEvent.REACHED, HarvestEvent.GRASPED, HarvestEvent.DETACHED, HarvestEvent.AT_BASKET,
        ):
            machine.fire(event, float(i))
        last = i == 2
        phase = machine.fire(
            HarvestEvent.LIST_EXHAUSTED if last else HarvestEvent.TARGETS_REMAINING, float(i)
        )
        assert phase is (HarvestPhase.RESCAN if last else HarvestPhase.REACH)
    machine.fire(HarvestEvent.BEGIN_SCAN, 3.0)
    machine.fire(HarvestEvent.NO_TARGETS, 3.0)

    assert machine.phase is HarvestPhase.DONE
    assert [a for _, a in machine.gripper_log] == ["gripper_close", "gripper_open"] * 3
    assert [e.seq for e in machine.audit] == list(range(len(machine.audit)))
    assert sum(e.target == "reach" for e in machine.audit) == 3


def test_notes_do_not_change_phase():
    machine = HarvestMachine()
    machine.note(0.0, "target_skipped", "outside workspace")
    assert machine.phase is HarvestPhase.HOME
    entry = machine.audit[0]
    assert entry.source == entry.target == "home"
    assert entry.event == "target_skipped"
