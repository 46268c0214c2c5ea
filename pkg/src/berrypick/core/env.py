"""Goal-conditioned reach environment on the kinematic arm.

The pure functions (`reset`, `step`, ...) work on a single `EnvState` whose
arrays have shape (6,) or on a batched one with a leading env axis.
`VecReachEnv` drives a batch of independently seeded environments.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from loguru import logger
from scipy.spatial.transform import Rotation

from berrypick.config import EnvConfig, RewardWeights
from berrypick.core.kinematics import (
    ArmModel,
    forward_kinematics,
    orientation_error,
    track_joint_target,
)
from berrypick.core.models import ACTION_DIM, JOINT_COUNT, PoseCommand
from berrypick.errors import ConfigError, DomainError, UsageError

MAX_COMMAND_ATTEMPTS = 100
REWARD_TERMS = ("pos", "fine", "ori", "act", "vel")


@dataclass(frozen=True)
class EnvState:
    q: np.ndarray
    qdot: np.ndarray
    a_prev: np.ndarray
    cmd_position: np.ndarray
    cmd_orientation: np.ndarray
    step: int | np.ndarray

    @property
    def command(self) -> PoseCommand:
        return PoseCommand(self.cmd_position, self.cmd_orientation)


def nominal_orientation(config: EnvConfig) -> Rotation:
    quat = np.asarray(config.nominal_orientation, dtype=float)
    return Rotation.from_quat(quat / np.linalg.norm(quat))


def sample_command(
    rng: np.random.Generator, config: EnvConfig, model: ArmModel
) -> PoseCommand:
    """Uniform position in the workspace box, perturbed nominal orientation."""
    low = np.asarray(config.workspace.min, dtype=float)
    high = np.asarray(config.workspace.max, dtype=float)
    max_angle = np.deg2rad(config.max_orientation_perturbation_deg)
    nominal = nominal_orientation(config)
    for _ in range(MAX_COMMAND_ATTEMPTS):
        position = rng.uniform(low, high)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, max_angle)
        orientation = (Rotation.from_rotvec(axis * angle) * nominal).as_quat()
        if np.linalg.norm(position - model.base_position) <= model.reach_radius:
            return PoseCommand(position=position, orientation=orientation)
    raise ConfigError(
        f"env.workspace: no reachable command after {MAX_COMMAND_ATTEMPTS} attempts"
    )


def build_observation(state: EnvState, model: ArmModel) -> np.ndarray:
    """[q_rel(6), qdot(6), cmd_position(3), cmd_quaternion(4), a_prev(6)]"""
    return np.concatenate(
        [
            state.q - model.q_default,
            state.qdot,
            state.cmd_position,
            state.cmd_orientation,
            state.a_prev,
        ],
        axis=-1,
    )


def ee_distance(state: EnvState, model: ArmModel) -> np.ndarray | float:
    pose = forward_kinematics(model, state.q)
    d = np.linalg.norm(pose.position - state.cmd_position, axis=-1)
    return float(d) if d.ndim == 0 else d


def compute_reward(
    state: EnvState, action: np.ndarray, model: ArmModel, w: RewardWeights
) -> tuple[np.ndarray | float, np.ndarray]:
    """Weighted five-term shaped reward.

    `state.a_prev` must still hold a_{t-1}; `action` is the clamped a_t.
    """
    if not w.sigma > 0:
        raise ConfigError(f"env.weights.sigma must be positive, got {w.sigma}")
    pose = forward_kinematics(model, state.q)
    d = np.linalg.norm(pose.position - state.cmd_position, axis=-1)
    dtheta = orientation_error(pose.orientation, state.cmd_orientation)
    components = np.stack(
        np.broadcast_arrays(
            -d,
            np.exp(-d / w.sigma),
            -np.asarray(dtheta),
            -np.sum((action - state.a_prev) ** 2, axis=-1),
            -np.sum(state.qdot**2, axis=-1),
        ),
        axis=-1,
    )
    total = components @ np.asarray(w.as_array())
    return (float(total) if total.ndim == 0 else total), components


def clamp_action(action) -> np.ndarray:
    action = np.asarray(action, dtype=float)
    if action.shape[-1:] != (ACTION_DIM,):
        raise DomainError(f"action must have {ACTION_DIM} entries, got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise DomainError("action contains non-finite values")
    return np.clip(action, -1.0, 1.0)


def track_action(q, action, config: EnvConfig, model: ArmModel) -> tuple[np.ndarray, np.ndarray]:
    """Track the joint target of a clamped action for `decimation` sub-steps.

    The returned velocity is that of the last sub-step.
    """
    q_target = model.q_default + config.action_scale * action
    qdot = np.zeros_like(q)
    for _ in range(config.decimation):
        q, qdot = track_joint_target(q, q_target, model.limits, config.dt)
    return q, qdot


def step_detailed(
    state: EnvState, action, config: EnvConfig, model: ArmModel
) -> tuple[EnvState, np.ndarray | float, np.ndarray, np.ndarray | bool, np.ndarray]:
    """`step` that also returns the five reward components."""
    if np.any(np.asarray(state.step) >= config.horizon):
        raise UsageError("cannot step a finished episode; reset it first")
    action = clamp_action(action)
    q, qdot = track_action(state.q, action, config, model)

    moved = dataclasses.replace(state, q=q, qdot=qdot)
    reward, components = compute_reward(moved, action, model, config.weights)
    next_step = state.step + 1
    next_state = dataclasses.replace(moved, a_prev=action, step=next_step)
    done = next_step >= config.horizon
    return next_state, reward, components, done, build_observation(next_state, model)


def step(
    state: EnvState, action, config: EnvConfig, model: ArmModel
) -> tuple[EnvState, np.ndarray | float, np.ndarray | bool, np.ndarray]:
    next_state, reward, _, done, obs = step_detailed(state, action, config, model)
    return next_state, reward, done, obs


def trace_record(t: int, state: EnvState, components: np.ndarray) -> dict:
    """One line of a rollout trace; `state` is the post-step state."""
    return {
        "t": int(t),
        "q": [float(x) for x in state.q],
        "qdot": [float(x) for x in state.qdot],
        "action": [float(x) for x in state.a_prev],
        "reward_components": dict(zip(REWARD_TERMS, (float(c) for c in components))),
    }


def reset(
    rng: np.random.Generator, config: EnvConfig, model: ArmModel
) -> tuple[EnvState, np.ndarray]:
    q = model.q_default.copy()
    if config.init_jitter > 0:
        q = np.clip(
            q + rng.uniform(-config.init_jitter, config.init_jitter, JOINT_COUNT),
            model.limits.pos_min,
            model.limits.pos_max,
        )
    command = sample_command(rng, config, model)
    state = EnvState(
        q=q,
        qdot=np.zeros(JOINT_COUNT),
        a_prev=np.zeros(ACTION_DIM),
        cmd_position=command.position,
        cmd_orientation=command.orientation,
        step=0,
    )
    return state, build_observation(state, model)


def stack_states(states: list[EnvState]) -> EnvState:
    return EnvState(
        q=np.stack([s.q for s in states]),
        qdot=np.stack([s.qdot for s in states]),
        a_prev=np.stack([s.a_prev for s in states]),
        cmd_position=np.stack([s.cmd_position for s in states]),
        cmd_orientation=np.stack([s.cmd_orientation for s in states]),
        step=np.array([s.step for s in states], dtype=int),
    )


def unstack_state(state: EnvState, i: int) -> EnvState:
    return EnvState(
        q=state.q[i].copy(),
        qdot=state.qdot[i].copy(),
        a_prev=state.a_prev[i].copy(),
        cmd_position=state.cmd_position[i].copy(),
        cmd_orientation=state.cmd_orientation[i].copy(),
        step=int(state.step[i]),
    )


def env_generators(seed: int, num_envs: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(num_envs)
    return [np.random.default_rng(child) for child in children]


class VecReachEnv:
    """N independent reach environments stepped as one batch.

    Finished environments are reset in place with their own generator, so a
    batch trajectory equals running each environment on its own.
    """

    def __init__(
        self,
        config: EnvConfig,
        model: ArmModel,
        num_envs: int,
        rngs: list[np.random.Generator] | None = None,
    ):
        self.config = config
        self.model = model
        self.num_envs = num_envs
        self.rngs = rngs if rngs is not None else env_generators(config.seed, num_envs)
        if len(self.rngs) != num_envs:
            raise UsageError("need one generator per environment")
        self.state: EnvState | None = None
        self.episode_returns = np.zeros(num_envs)

    def reset(self) -> np.ndarray:
        states = [reset(rng, self.config, self.model)[0] for rng in self.rngs]
        self.state = stack_states(states)
        self.episode_returns = np.zeros(self.num_envs)
        return build_observation(self.state, self.model)

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
        if self.state is None:
            raise UsageError("reset() must be called before step()")
        next_state, rewards, components, dones, _ = step_detailed(
            self.state, actions, self.config, self.model
        )
        distances = ee_distance(next_state, self.model)
        self.episode_returns += rewards
        info = {
            "distance": distances,
            "components": components,
            "state": next_state,
            "final_distance": distances[dones],
            "episode_return": self.episode_returns[dones].copy(),
        }
        if np.any(dones):
            logger.debug(f"{int(dones.sum())} episode(s) finished")
            fresh = [
                reset(self.rngs[i], self.config, self.model)[0] if dones[i]
                else unstack_state(next_state, i)
                for i in range(self.num_envs)
            ]
            next_state = stack_states(fresh)
            self.episode_returns[dones] = 0.0
        self.state = next_state
        return build_observation(next_state, self.model), rewards, dones, info
