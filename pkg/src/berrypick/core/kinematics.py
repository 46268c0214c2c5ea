"""Kinematic model of a 6-revolute-joint arm.

Standard Denavit-Hartenberg convention: each joint contributes
Rz(theta + offset) · Tz(d) · Tx(a) · Rx(alpha). All functions accept a single
joint vector of shape (6,) or a batch of shape (..., 6).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from berrypick.config import ArmConfig
from berrypick.core.models import JOINT_COUNT, EEPose, JointLimits
from berrypick.errors import DomainError


@dataclass(frozen=True)
class ArmModel:
    dh: np.ndarray  # (6, 4): a, d, alpha, theta_offset
    base_frame: np.ndarray  # (4, 4)
    q_default: np.ndarray  # (6,)
    limits: JointLimits

    @classmethod
    def from_config(cls, config: ArmConfig) -> "ArmModel":
        return cls(
            dh=np.asarray(config.dh, dtype=float),
            base_frame=np.asarray(config.base_frame, dtype=float),
            q_default=np.asarray(config.q_default, dtype=float),
            limits=JointLimits(
                pos_min=np.asarray(config.pos_min, dtype=float),
                pos_max=np.asarray(config.pos_max, dtype=float),
                vel_max=np.asarray(config.vel_max, dtype=float),
            ),
        )

    @property
    def reach_radius(self) -> float:
        return float(np.abs(self.dh[:, 0]).sum() + np.abs(self.dh[:, 1]).sum())

    @property
    def base_position(self) -> np.ndarray:
        return self.base_frame[:3, 3]


def _as_joints(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[-1:] != (JOINT_COUNT,):
        raise DomainError(f"joint vector must end in {JOINT_COUNT} entries, got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DomainError("joint vector contains non-finite values")
    return q


def dh_transform(a: float, d: float, alpha: float, theta: np.ndarray) -> np.ndarray:
    """Homogeneous transform of one DH row for (batched) joint angles."""
    theta = np.asarray(theta, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T = np.zeros(theta.shape + (4, 4))
    T[..., 0, 0] = ct
    T[..., 0, 1] = -st * ca
    T[..., 0, 2] = st * sa
    T[..., 0, 3] = a * ct
    T[..., 1, 0] = st
    T[..., 1, 1] = ct * ca
    T[..., 1, 2] = -ct * sa
    T[..., 1, 3] = a * st
    T[..., 2, 1] = sa
    T[..., 2, 2] = ca
    T[..., 2, 3] = d
    T[..., 3, 3] = 1.0
    return T


def joint_frames(model: ArmModel, q) -> np.ndarray:
    """Base frame followed by the frame after each joint: shape (..., 7, 4, 4)."""
    q = _as_joints(q)
    frames = [np.broadcast_to(model.base_frame, q.shape[:-1] + (4, 4))]
    for i, (a, d, alpha, offset) in enumerate(model.dh):
        frames.append(frames[-1] @ dh_transform(a, d, alpha, q[..., i] + offset))
    return np.stack(frames, axis=-3)


def tool_transform(model: ArmModel, q) -> np.ndarray:
    q = _as_joints(q)
    T = np.broadcast_to(model.base_frame, q.shape[:-1] + (4, 4))
    for i, (a, d, alpha, offset) in enumerate(model.dh):
        T = T @ dh_transform(a, d, alpha, q[..., i] + offset)
    return T


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    quat = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    return quat.reshape(R.shape[:-2] + (4,))


def forward_kinematics(model: ArmModel, q) -> EEPose:
    T = tool_transform(model, q)
    return EEPose(
        position=T[..., :3, 3].copy(),
        orientation=matrix_to_quaternion(T[..., :3, :3]),
    )


def track_joint_target(
    q, q_target, limits: JointLimits, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """One step of first-order saturated position tracking.

    Each joint moves toward its target by at most vel_max * dt and is then
    clamped to its position range.
    """
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    q = _as_joints(q)
    q_target = _as_joints(q_target)
    max_step = limits.vel_max * dt
    step = np.clip(q_target - q, -max_step, max_step)
    q_next = np.clip(q + step, limits.pos_min, limits.pos_max)
    qdot = (q_next - q) / dt
    return q_next, qdot


def orientation_error(a, b, atol: float = 1e-6) -> np.ndarray | float:
    """Geodesic angle between two unit quaternions, in [0, pi]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    for name, quat in (("a", a), ("b", b)):
        if quat.shape[-1:] != (4,):
            raise DomainError(f"quaternion {name} must have 4 components")
        if not np.all(np.abs(np.linalg.norm(quat, axis=-1) - 1.0) <= atol):
            raise DomainError(f"quaternion {name} is not unit-norm")
    dot = np.abs(np.sum(a * b, axis=-1))
    angle = 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))
    return float(angle) if angle.ndim == 0 else angle
