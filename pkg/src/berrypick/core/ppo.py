"""Clipped-surrogate PPO over the vectorized reach environment."""

import dataclasses
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from loguru import logger

from berrypick.config import EnvConfig, PpoConfig
from berrypick.core.env import VecReachEnv, env_generators
from berrypick.core.kinematics import ArmModel
from berrypick.core.models import ACTION_DIM, OBS_DIM
from berrypick.core.networks import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    AdamState,
    MlpParams,
    adam_update,
    clamped_log_std,
    clip_by_global_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    policy_forward,
    value_forward,
)
from berrypick.errors import DomainError, NumericalError, UsageError

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass
class RolloutBuffer:
    observations: np.ndarray  # (T, N, obs)
    actions: np.ndarray  # (T, N, act)
    log_probs: np.ndarray  # (T, N)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    bootstrap_values: np.ndarray  # (N,)
    steps_filled: int = 0
    bootstrapped: bool = False

    @classmethod
    def empty(cls, steps: int, num_envs: int) -> "RolloutBuffer":
        return cls(
            observations=np.zeros((steps, num_envs, OBS_DIM)),
            actions=np.zeros((steps, num_envs, ACTION_DIM)),
            log_probs=np.zeros((steps, num_envs)),
            rewards=np.zeros((steps, num_envs)),
            values=np.zeros((steps, num_envs)),
            dones=np.zeros((steps, num_envs), dtype=bool),
            bootstrap_values=np.zeros(num_envs),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    @property
    def filled(self) -> bool:
        return self.steps_filled == self.shape[0] and self.bootstrapped

    def add(self, obs, actions, log_probs, rewards, values, dones):
        t = self.steps_filled
        if t >= self.shape[0]:
            raise UsageError("rollout buffer is already full")
        self.observations[t] = obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self.steps_filled += 1

    def finish(self, bootstrap_values: np.ndarray):
        self.bootstrap_values = np.asarray(bootstrap_values, dtype=float)
        self.bootstrapped = True


@dataclass(frozen=True)
class AdvantageSet:
    advantages: np.ndarray
    returns: np.ndarray
    mean: float
    std: float

    def normalized(self, eps: float = 1e-8) -> np.ndarray:
        return (self.advantages - self.mean) / (self.std + eps)


@dataclass(frozen=True)
class Minibatch:
    observations: np.ndarray
    actions: np.ndarray


@dataclass(frozen=True)
class LossStats:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


@dataclass(frozen=True)
class IterationStats:
    iteration: int
    mean_reward: float
    mean_final_distance: float
    episodes: int
    loss_total: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float


@dataclass
class TrainResult:
    actor: MlpParams
    critic: MlpParams
    curve: list[IterationStats]


def gaussian_log_prob(action: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    z = (action - mean) / std
    return np.sum(-0.5 * z**2 - np.log(std) - HALF_LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + HALF_LOG_2PIE))


def sample_and_logprob(
    mean: np.ndarray, std: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    if not np.all(std > 0):
        raise DomainError("standard deviations must be positive")
    action = mean + std * rng.standard_normal(np.shape(mean))
    return action, gaussian_log_prob(action, mean, std)


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> AdvantageSet:
    """Recursive GAE; a done flag at step t cuts the bootstrap from t+1."""
    if not buffer.filled:
        raise UsageError("rollout buffer must be filled and bootstrapped before GAE")
    steps = buffer.shape[0]
    advantages = np.zeros(buffer.shape)
    running = np.zeros(buffer.shape[1])
    for t in reversed(range(steps)):
        next_value = buffer.bootstrap_values if t == steps - 1 else buffer.values[t + 1]
        nonterminal = 1.0 - buffer.dones[t]
        delta = buffer.rewards[t] + gamma * next_value * nonterminal - buffer.values[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
    return AdvantageSet(
        advantages=advantages,
        returns=advantages + buffer.values,
        mean=float(advantages.mean()),
        std=float(advantages.std()),
    )


def ppo_losses(
    params_actor: MlpParams,
    params_critic: MlpParams,
    minibatch: Minibatch,
    old_logp: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PpoConfig,
) -> tuple[float, MlpParams, MlpParams, LossStats]:
    """Total PPO loss and its exact gradients w.r.t. actor and critic."""
    obs, actions = minibatch.observations, minibatch.actions
    batch = obs.shape[0]
    eps = config.clip_eps

    mean, actor_cache = mlp_forward(params_actor, obs)
    log_std = clamped_log_std(params_actor)
    std = np.exp(log_std)
    diff = actions - mean
    z2 = (diff / std) ** 2
    logp = np.sum(-0.5 * z2 - log_std - HALF_LOG_2PI, axis=-1)
    ratio = np.exp(logp - old_logp)
    surr_unclipped = ratio * advantages
    surr_clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages
    policy_loss = -float(np.mean(np.minimum(surr_unclipped, surr_clipped)))
    entropy = gaussian_entropy(log_std)

    values, critic_cache = mlp_forward(params_critic, obs)
    values = values[:, 0]
    value_loss = float(np.mean((values - returns) ** 2))

    loss_total = (
        policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    )
    if not np.isfinite(loss_total):
        raise NumericalError(
            f"non-finite PPO loss (policy={policy_loss}, value={value_loss}, "
            f"entropy={entropy}, max|ratio|={np.max(np.abs(ratio))})"
        )

    # the clipped branch is constant in theta whenever it is the minimum
    unclipped_active = surr_unclipped <= surr_clipped
    g_logp = -(unclipped_active * advantages * ratio) / batch
    g_mean = g_logp[:, None] * diff / std**2
    grads_actor = mlp_backward(params_actor, actor_cache, g_mean)
    g_log_std = np.sum(g_logp[:, None] * (z2 - 1.0), axis=0) - config.entropy_coef
    inside = (params_actor.log_std > LOG_STD_MIN) & (params_actor.log_std < LOG_STD_MAX)
    grads_actor = dataclasses.replace(grads_actor, log_std=g_log_std * inside)

    g_values = config.value_coef * 2.0 * (values - returns) / batch
    grads_critic = mlp_backward(params_critic, critic_cache, g_values[:, None])

    stats = LossStats(
        policy_loss=policy_loss,
        value_loss=value_loss,
        entropy=entropy,
        approx_kl=float(np.mean(old_logp - logp)),
        clip_fraction=float(np.mean(np.abs(ratio - 1.0) > eps)),
    )
    return float(loss_total), grads_actor, grads_critic, stats


def init_actor_critic(
    rng: np.random.Generator, config: PpoConfig
) -> tuple[MlpParams, MlpParams]:
    hidden = list(config.hidden_sizes)
    actor = init_mlp(
        rng, [OBS_DIM, *hidden, ACTION_DIM], output_scale=0.01, log_std=config.init_log_std
    )
    critic = init_mlp(rng, [OBS_DIM, *hidden, 1])
    return actor, critic


@dataclass
class EpisodeTally:
    """Episodes that ended during one rollout, plus the running state of the rest."""

    returns: list[float]
    final_distances: list[float]
    live_returns: np.ndarray
    live_distances: np.ndarray

    @property
    def episodes(self) -> int:
        return len(self.returns)

    def mean_return(self) -> float:
        # no episode ends while the horizon exceeds the rollout; use partial returns
        return float(np.mean(self.returns) if self.returns else np.mean(self.live_returns))

    def mean_final_distance(self) -> float:
        if self.final_distances:
            return float(np.mean(self.final_distances))
        return float(np.mean(self.live_distances))


def collect_rollout(
    env: VecReachEnv,
    obs: np.ndarray,
    actor: MlpParams,
    critic: MlpParams,
    steps: int,
    rng: np.random.Generator,
) -> tuple[RolloutBuffer, np.ndarray, EpisodeTally]:
    """Fill a buffer; returns it, the next observation and the episode tally."""
    buffer = RolloutBuffer.empty(steps, env.num_envs)
    tally = EpisodeTally([], [], np.zeros(env.num_envs), np.zeros(env.num_envs))
    for _ in range(steps):
        mean, std = policy_forward(actor, obs)
        actions, logp = sample_and_logprob(mean, std, rng)
        values = value_forward(critic, obs)
        next_obs, rewards, dones, info = env.step(actions)
        buffer.add(obs, actions, logp, rewards, values, dones)
        tally.returns.extend(info["episode_return"].tolist())
        tally.final_distances.extend(info["final_distance"].tolist())
        tally.live_distances = info["distance"]
        obs = next_obs
    tally.live_returns = env.episode_returns.copy()
    buffer.finish(value_forward(critic, obs))
    return buffer, obs, tally


def _optimize(
    actor: MlpParams,
    critic: MlpParams,
    buffer: RolloutBuffer,
    adv: AdvantageSet,
    config: PpoConfig,
    rng: np.random.Generator,
    actor_opt: AdamState,
    critic_opt: AdamState,
) -> tuple[MlpParams, MlpParams, float, LossStats]:
    total = buffer.shape[0] * buffer.shape[1]
    obs = buffer.observations.reshape(total, OBS_DIM)
    actions = buffer.actions.reshape(total, ACTION_DIM)
    old_logp = buffer.log_probs.reshape(total)
    advantages = (adv.normalized() if config.normalize_advantages else adv.advantages)
    advantages = advantages.reshape(total)
    returns = adv.returns.reshape(total)

    n_actor = len(actor.arrays())
    losses, stats = [], []
    for _ in range(config.epochs):
        order = rng.permutation(total)
        for idx in np.array_split(order, config.minibatches):
            loss, g_actor, g_critic, s = ppo_losses(
                actor,
                critic,
                Minibatch(obs[idx], actions[idx]),
                old_logp[idx],
                advantages[idx],
                returns[idx],
                config,
            )
            clipped, _ = clip_by_global_norm(
                g_actor.arrays() + g_critic.arrays(), config.max_grad_norm
            )
            actor = adam_update(
                actor, g_actor.with_arrays(clipped[:n_actor]), config.learning_rate, actor_opt
            )
            critic = adam_update(
                critic, g_critic.with_arrays(clipped[n_actor:]), config.learning_rate, critic_opt
            )
            losses.append(loss)
            stats.append(s)
    mean_stats = LossStats(
        *(float(np.mean([getattr(s, f.name) for s in stats])) for f in dataclasses.fields(LossStats))
    )
    return actor, critic, float(np.mean(losses)), mean_stats


CheckpointHook = Callable[[int, MlpParams, MlpParams], None]
IterationHook = Callable[[IterationStats], None]


def train(
    env_config: EnvConfig,
    ppo_config: PpoConfig,
    model: ArmModel,
    on_checkpoint: CheckpointHook | None = None,
    on_iteration: IterationHook | None = None,
) -> TrainResult:
    """Collect -> GAE -> epochs x minibatches of clipped-surrogate updates."""
    seeds = np.random.SeedSequence(env_config.seed).spawn(2)
    policy_rng = np.random.default_rng(seeds[0])
    env_rngs = env_generators(int(seeds[1].generate_state(1)[0]), ppo_config.num_envs)
    actor, critic = init_actor_critic(policy_rng, ppo_config)
    curve: list[IterationStats] = []
    if on_checkpoint:
        on_checkpoint(0, actor, critic)
    if ppo_config.iterations == 0:
        return TrainResult(actor, critic, curve)

    env = VecReachEnv(env_config, model, ppo_config.num_envs, rngs=env_rngs)
    obs = env.reset()
    actor_opt, critic_opt = AdamState(), AdamState()
    for iteration in range(1, ppo_config.iterations + 1):
        buffer, obs, tally = collect_rollout(
            env, obs, actor, critic, ppo_config.steps_per_env, policy_rng
        )
        adv = compute_gae(buffer, ppo_config.gamma, ppo_config.lam)
        try:
            actor, critic, loss, s = _optimize(
                actor, critic, buffer, adv, ppo_config, policy_rng, actor_opt, critic_opt
            )
        except NumericalError as e:
            raise NumericalError(f"iteration {iteration}: {e}", iteration=iteration) from e
        if not (actor.is_finite() and critic.is_finite()):
            raise NumericalError(
                f"iteration {iteration}: parameters became non-finite", iteration=iteration
            )

        stats = IterationStats(
            iteration=iteration,
            mean_reward=tally.mean_return(),
            mean_final_distance=tally.mean_final_distance(),
            episodes=tally.episodes,
            loss_total=loss,
            policy_loss=s.policy_loss,
            value_loss=s.value_loss,
            entropy=s.entropy,
            approx_kl=s.approx_kl,
            clip_fraction=s.clip_fraction,
        )
        curve.append(stats)
        logger.info(
            f"iter {iteration}/{ppo_config.iterations} reward={stats.mean_reward:.4f} "
            f"final_dist={stats.mean_final_distance:.4f} loss={loss:.4f}"
        )
        if on_iteration:
            on_iteration(stats)
        if on_checkpoint and (
            iteration % ppo_config.checkpoint_interval == 0
            or iteration == ppo_config.iterations
        ):
            on_checkpoint(iteration, actor, critic)
    return TrainResult(actor, critic, curve)


@dataclass(frozen=True)
class GradcheckReport:
    instances: int
    max_relative_error: float
    worst_parameter: str
    passed: bool
    tolerance: float


def _numeric_gradient(loss_fn: Callable[[list[np.ndarray]], float], arrays, h: float):
    grads = []
    for k, array in enumerate(arrays):
        g = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + h
            plus = loss_fn(arrays)
            array[idx] = original - h
            minus = loss_fn(arrays)
            array[idx] = original
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(
    config: PpoConfig,
    seed: int = 0,
    instances: int = 20,
    batch: int = 3,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-6,
    h: float = 1e-6,
    corrupt: str | None = None,
) -> GradcheckReport:
    """Compare `ppo_losses` gradients with central finite differences.

    `corrupt` names a parameter (e.g. "actor.layer1.weight") whose analytic
    gradient is deliberately perturbed, to exercise the failure path.
    """
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, ""
    for _ in range(instances):
        hidden = [int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3)))]
        actor = init_mlp(rng, [OBS_DIM, *hidden, ACTION_DIM], log_std=0.0)
        actor = dataclasses.replace(actor, log_std=rng.uniform(-0.5, 0.5, ACTION_DIM))
        critic = init_mlp(rng, [OBS_DIM, *hidden, 1])
        obs = rng.normal(size=(batch, OBS_DIM))
        mean, std = policy_forward(actor, obs)
        actions = mean + std * rng.normal(size=mean.shape)
        old_logp = gaussian_log_prob(actions, mean, std) + rng.uniform(-0.3, 0.3, batch)
        advantages = rng.normal(size=batch)
        returns = rng.normal(size=batch)
        mb = Minibatch(obs, actions)

        _, g_actor, g_critic, _ = ppo_losses(
            actor, critic, mb, old_logp, advantages, returns, config
        )
        analytic = g_actor.arrays() + g_critic.arrays()
        names = [f"actor.{n}" for n in actor.names()] + [f"critic.{n}" for n in critic.names()]
        if corrupt is not None:
            if corrupt not in names:
                raise DomainError(f"unknown parameter {corrupt!r}")
            k = names.index(corrupt)
            analytic[k] = analytic[k] + 1e-2 * (1.0 + np.abs(analytic[k]))

        n_actor = len(actor.arrays())
        arrays = [a.copy() for a in actor.arrays() + critic.arrays()]

        def loss_fn(arrs):
            a = actor.with_arrays(arrs[:n_actor])
            c = critic.with_arrays(arrs[n_actor:])
            return ppo_losses(a, c, mb, old_logp, advantages, returns, config)[0]

        numeric = _numeric_gradient(loss_fn, arrays, h)
        for name, a, n in zip(names, analytic, numeric):
            diff = np.abs(a - n)
            rel = np.where(
                diff <= abs_floor, 0.0, diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
            )
            if rel.size and rel.max() > worst:
                worst, worst_name = float(rel.max()), name
    passed = worst < tolerance
    log = logger.info if passed else logger.warning
    log(f"gradcheck: {instances} instances, max relative error {worst:.3e} ({worst_name or 'n/a'})")
    return GradcheckReport(instances, worst, worst_name, passed, tolerance)
