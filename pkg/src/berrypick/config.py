import dataclasses
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w
from loguru import logger
from platformdirs import user_config_dir

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from berrypick.errors import ConfigError, StorageError

HALF_PI = math.pi / 2
IDENTITY_4X4 = (
    (1.0, 0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.0),
    (0.0, 0.0, 0.0, 1.0),
)


@dataclass(frozen=True)
class LoggingConfig:
    log_level: str = "INFO"


@dataclass(frozen=True)
class ArmConfig:
    # rows of (a, d, alpha, theta_offset); nominal UR10e values
    dh: tuple = (
        (0.0, 0.1807, HALF_PI, 0.0),
        (-0.6127, 0.0, 0.0, 0.0),
        (-0.57155, 0.0, 0.0, 0.0),
        (0.0, 0.17415, HALF_PI, 0.0),
        (0.0, 0.11985, -HALF_PI, 0.0),
        (0.0, 0.11655, 0.0, 0.0),
    )
    base_frame: tuple = IDENTITY_4X4
    q_default: tuple = (0.0, -HALF_PI, HALF_PI, -HALF_PI, -HALF_PI, 0.0)
    pos_min: tuple = (-2 * math.pi, -2 * math.pi, -math.pi, -2 * math.pi, -2 * math.pi, -2 * math.pi)
    pos_max: tuple = (2 * math.pi, 2 * math.pi, math.pi, 2 * math.pi, 2 * math.pi, 2 * math.pi)
    vel_max: tuple = (2.0944, 2.0944, 3.1416, 3.1416, 3.1416, 3.1416)


@dataclass(frozen=True)
class WorkspaceConfig:
    min: tuple = (-0.80, -0.30, 0.45)
    max: tuple = (-0.55, -0.05, 0.70)


@dataclass(frozen=True)
class RewardWeights:
    w_pos: float = 1.0
    w_fine: float = 0.5
    w_ori: float = 0.5
    w_act: float = 0.01
    w_vel: float = 0.01
    sigma: float = 0.1

    def as_array(self) -> tuple[float, float, float, float, float]:
        return (self.w_pos, self.w_fine, self.w_ori, self.w_act, self.w_vel)


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 1.0 / 60.0
    decimation: int = 2
    horizon: int = 240
    action_scale: float = 0.5
    # (x, y, z, w); downward-facing tool at the home pose
    nominal_orientation: tuple = (math.sqrt(0.5), math.sqrt(0.5), 0.0, 0.0)
    max_orientation_perturbation_deg: float = 15.0
    init_jitter: float = 0.0
    seed: int = 0
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.005
    learning_rate: float = 1e-3
    epochs: int = 5
    minibatches: int = 4
    steps_per_env: int = 24
    num_envs: int = 64
    iterations: int = 500
    hidden_sizes: tuple = (128, 128)
    init_log_std: float = 0.0
    normalize_advantages: bool = True
    max_grad_norm: float = 1.0
    checkpoint_interval: int = 50


@dataclass(frozen=True)
class PerceptionConfig:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    # camera above the workspace looking straight down
    extrinsic: tuple = (
        (1.0, 0.0, 0.0, -0.675),
        (0.0, -1.0, 0.0, -0.175),
        (0.0, 0.0, -1.0, 1.05),
        (0.0, 0.0, 0.0, 1.0),
    )
    tau_p: float = 40.0
    buffer_size: int = 15
    min_quality: float = 0.75
    depth_min: float = 0.1
    depth_max: float = 2.0
    max_misses: int = 10


@dataclass(frozen=True)
class StreamerConfig:
    vel_max: tuple = (2.0944, 2.0944, 3.1416, 3.1416, 3.1416, 3.1416)
    convergence_radius: float = 0.03
    halt_demand_threshold: float = 0.5
    min_command_duration: float = 0.02
    pull_offset: float = 0.10
    basket_position: tuple = (-0.58, -0.07, 0.68)


@dataclass(frozen=True)
class MetricsConfig:
    resample_rate: float = 100.0
    ma_window: int = 9
    rdp_epsilon: float = 0.002
    jerk_percentile: float = 99.0
    stillness_threshold: float = 0.001
    reach_tolerance: float = 0.02


@dataclass(frozen=True)
class SimulationConfig:
    max_scans: int = 3
    reach_steps: int = 240


@dataclass(frozen=True)
class RootConfig:
    seed: int = 0
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    perception: PerceptionConfig = field(default_factory=PerceptionConfig)
    streamer: StreamerConfig = field(default_factory=StreamerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def with_seed(self, seed: int) -> "RootConfig":
        return dataclasses.replace(
            self, seed=seed, env=dataclasses.replace(self.env, seed=seed)
        )


def _to_tuple(value: Any) -> Any:
    if isinstance(value, list | tuple):
        return tuple(_to_tuple(v) for v in value)
    return value


def _build(cls: type, data: dict, path: str) -> Any:
    """Build dataclass `cls` from a (partial) dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key: {where}{unknown[0]}")

    kwargs = {}
    for name, value in data.items():
        f = known[name]
        key_path = f"{path}.{name}" if path else name
        default = (
            f.default_factory()
            if f.default_factory is not dataclasses.MISSING
            else f.default
        )
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, key_path)
        elif isinstance(default, tuple):
            kwargs[name] = _to_tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key_path}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, int | float):
            if not isinstance(value, int | float) or isinstance(value, bool):
                raise ConfigError(f"{key_path}: expected a number")
            kwargs[name] = type(default)(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _require(condition: bool, field_path: str, message: str):
    if not condition:
        raise ConfigError(f"{field_path}: {message}")


def _check_shape(value: tuple, shape: tuple[int, ...], field_path: str):
    try:
        ok = _shape_of(value) == shape
    except TypeError:
        ok = False
    _require(ok, field_path, f"expected shape {shape}")
    flat = _flatten(value)
    _require(
        all(isinstance(v, int | float) and math.isfinite(v) for v in flat),
        field_path,
        "all entries must be finite numbers",
    )


def _shape_of(value: Any) -> tuple[int, ...]:
    if isinstance(value, tuple):
        if not value:
            return (0,)
        inner = {_shape_of(v) for v in value}
        if len(inner) != 1:
            raise TypeError("ragged")
        return (len(value), *inner.pop())
    return ()


def _flatten(value: Any) -> list:
    if isinstance(value, tuple):
        return [x for v in value for x in _flatten(v)]
    return [value]


def rigid_transform_problem(matrix) -> str | None:
    """Why `matrix` is not a proper rigid 4x4 transform; None when it is one."""
    T = np.asarray(matrix, dtype=float)
    if T.shape != (4, 4):
        return "expected a 4x4 matrix"
    R = T[:3, :3]
    if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
        return "rotation block must be orthonormal"
    if abs(np.linalg.det(R) - 1.0) > 1e-9:
        return "rotation determinant must be +1"
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        return "bottom row must be (0, 0, 0, 1)"
    return None


def _check_rigid(matrix: tuple, field_path: str):
    _check_shape(matrix, (4, 4), field_path)
    problem = rigid_transform_problem(matrix)
    _require(problem is None, field_path, problem or "")


def reach_radius(arm: ArmConfig) -> float:
    """Radius of the sphere around the base that bounds every tool position."""
    return sum(abs(row[0]) + abs(row[1]) for row in arm.dh)


def validate_config(config: RootConfig) -> RootConfig:
    """Check every field and cross-field invariant; return the config unchanged."""
    arm = config.arm
    _check_shape(arm.dh, (6, 4), "arm.dh")
    _check_rigid(arm.base_frame, "arm.base_frame")
    for name in ("q_default", "pos_min", "pos_max", "vel_max"):
        _check_shape(getattr(arm, name), (6,), f"arm.{name}")
    _require(
        all(lo < hi for lo, hi in zip(arm.pos_min, arm.pos_max)),
        "arm.pos_min",
        "must be strictly below arm.pos_max",
    )
    _require(all(v > 0 for v in arm.vel_max), "arm.vel_max", "must be positive")

    env = config.env
    _require(env.dt > 0, "env.dt", "must be positive")
    _require(env.decimation >= 1, "env.decimation", "must be >= 1")
    _require(env.horizon >= 1, "env.horizon", "must be >= 1")
    _require(env.action_scale > 0, "env.action_scale", "must be positive")
    _require(env.init_jitter >= 0, "env.init_jitter", "must be non-negative")
    _require(
        0 <= env.max_orientation_perturbation_deg <= 180,
        "env.max_orientation_perturbation_deg",
        "must lie in [0, 180]",
    )
    _check_shape(env.nominal_orientation, (4,), "env.nominal_orientation")
    _require(
        math.hypot(*env.nominal_orientation) > 0,
        "env.nominal_orientation",
        "must be a non-zero quaternion",
    )
    _check_shape(env.workspace.min, (3,), "env.workspace.min")
    _check_shape(env.workspace.max, (3,), "env.workspace.max")
    _require(
        all(lo <= hi for lo, hi in zip(env.workspace.min, env.workspace.max)),
        "env.workspace.min",
        "must not exceed env.workspace.max",
    )
    w = env.weights
    _require(
        all(math.isfinite(v) for v in (*w.as_array(), w.sigma)),
        "env.weights",
        "must be finite",
    )
    _require(w.sigma > 0, "env.weights.sigma", "must be positive")

    radius = reach_radius(arm)
    base = [row[3] for row in arm.base_frame[:3]]
    for corner in _box_corners(env.workspace):
        dist = math.dist(corner, base)
        _require(
            dist <= radius,
            "env.workspace.max",
            f"corner {corner} lies {dist:.3f} m from the base, "
            f"outside the {radius:.3f} m reach sphere",
        )

    ppo = config.ppo
    _require(0 < ppo.gamma <= 1, "ppo.gamma", "must lie in (0, 1]")
    _require(0 <= ppo.lam <= 1, "ppo.lam", "must lie in [0, 1]")
    _require(ppo.clip_eps > 0, "ppo.clip_eps", "must be positive")
    _require(ppo.learning_rate > 0, "ppo.learning_rate", "must be positive")
    _require(ppo.num_envs >= 1, "ppo.num_envs", "must be >= 1")
    _require(ppo.steps_per_env >= 1, "ppo.steps_per_env", "must be >= 1")
    _require(ppo.epochs >= 1, "ppo.epochs", "must be >= 1")
    _require(
        1 <= ppo.minibatches <= ppo.num_envs * ppo.steps_per_env,
        "ppo.minibatches",
        "must lie in [1, num_envs * steps_per_env]",
    )
    _require(ppo.iterations >= 0, "ppo.iterations", "must be >= 0")
    _require(
        isinstance(ppo.hidden_sizes, tuple)
        and len(ppo.hidden_sizes) >= 1
        and all(isinstance(h, int) and h >= 1 for h in ppo.hidden_sizes),
        "ppo.hidden_sizes",
        "must list at least one positive width",
    )
    _require(ppo.max_grad_norm >= 0, "ppo.max_grad_norm", "must be non-negative")
    _require(
        ppo.checkpoint_interval >= 1, "ppo.checkpoint_interval", "must be >= 1"
    )

    per = config.perception
    _require(per.fx > 0 and per.fy > 0, "perception.fx", "focal lengths must be positive")
    _require(per.width >= 1 and per.height >= 1, "perception.width", "must be >= 1")
    _check_rigid(per.extrinsic, "perception.extrinsic")
    _require(per.tau_p > 0, "perception.tau_p", "must be positive")
    _require(per.buffer_size >= 1, "perception.buffer_size", "must be >= 1")
    _require(
        0 <= per.min_quality <= 1, "perception.min_quality", "must lie in [0, 1]"
    )
    _require(
        0 <= per.depth_min < per.depth_max,
        "perception.depth_min",
        "must be non-negative and below perception.depth_max",
    )
    _require(per.max_misses >= 1, "perception.max_misses", "must be >= 1")

    st = config.streamer
    _check_shape(st.vel_max, (6,), "streamer.vel_max")
    _require(all(v > 0 for v in st.vel_max), "streamer.vel_max", "must be positive")
    for name in (
        "convergence_radius",
        "halt_demand_threshold",
        "min_command_duration",
        "pull_offset",
    ):
        _require(getattr(st, name) > 0, f"streamer.{name}", "must be positive")
    _check_shape(st.basket_position, (3,), "streamer.basket_position")

    m = config.metrics
    _require(m.resample_rate > 0, "metrics.resample_rate", "must be positive")
    _require(
        m.ma_window >= 1 and m.ma_window % 2 == 1,
        "metrics.ma_window",
        "must be a positive odd sample count",
    )
    _require(m.rdp_epsilon >= 0, "metrics.rdp_epsilon", "must be non-negative")
    _require(
        0 < m.jerk_percentile < 100, "metrics.jerk_percentile", "must lie in (0, 100)"
    )
    _require(
        m.stillness_threshold >= 0,
        "metrics.stillness_threshold",
        "must be non-negative",
    )
    _require(m.reach_tolerance > 0, "metrics.reach_tolerance", "must be positive")

    sim = config.simulation
    _require(sim.max_scans >= 1, "simulation.max_scans", "must be >= 1")
    _require(sim.reach_steps >= 1, "simulation.reach_steps", "must be >= 1")
    return config


def _box_corners(box: WorkspaceConfig) -> list[tuple[float, float, float]]:
    return [
        (x, y, z)
        for x in (box.min[0], box.max[0])
        for y in (box.min[1], box.max[1])
        for z in (box.min[2], box.max[2])
    ]


def config_from_dict(data: dict) -> RootConfig:
    config = _build(RootConfig, data, "")
    # the root seed drives every generator; sections never carry their own
    env = data.get("env", {})
    if isinstance(env, dict) and "seed" in env:
        raise ConfigError("env.seed: set the top-level seed instead")
    return validate_config(config.with_seed(config.seed))


def config_to_dict(config: RootConfig) -> dict:
    def plain(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: plain(v) for k, v in value.items()}
        if isinstance(value, tuple | list):
            return [plain(v) for v in value]
        return value

    data = plain(dataclasses.asdict(config))
    del data["env"]["seed"]
    return data


def config_hash(config: RootConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def read_config_file(config_path: Path) -> dict:
    """Read and parse the TOML config file."""
    try:
        with open(config_path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as e:
        logger.error(f"Config file not found: {config_path}")
        raise StorageError(f"config file not found: {config_path}") from e
    except tomllib.TOMLDecodeError as e:
        # tomllib messages carry "(at line N, column M)"
        raise ConfigError(f"{config_path}: {e}") from e


def default_config_path() -> Path:
    return Path(user_config_dir("berrypick")) / "config.toml"


def load_config(path: Path | None = None) -> RootConfig:
    """Load, fill defaults and validate; falls back to the per-user config."""
    if path is None:
        candidate = default_config_path()
        if not candidate.exists():
            logger.debug("No config file given or found; using defaults")
            return validate_config(RootConfig())
        path = candidate
    logger.debug(f"Loading config from {path}")
    return config_from_dict(read_config_file(Path(path)))


def save_config(config: RootConfig, path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            tomli_w.dump(config_to_dict(config), f)
    except OSError as e:
        raise StorageError(f"cannot write config echo {path}: {e}") from e
    logger.info(f"Effective config written to {path}")


def resolve_log_level(config: RootConfig) -> str:
    return os.environ.get("LOG_LEVEL", config.logging.log_level).upper()
