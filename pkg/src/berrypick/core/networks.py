"""Dense networks with hand-written reverse-mode gradients, and Adam."""

from dataclasses import dataclass, field

import numpy as np

from berrypick.errors import DomainError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, y: 1.0 - y**2),
    "identity": (lambda z: z, lambda z, y: np.ones_like(z)),
}


@dataclass(frozen=True)
class DenseLayer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True)
class MlpParams:
    layers: tuple[DenseLayer, ...]
    # state-independent log standard deviations; actor only
    log_std: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = [a for layer in self.layers for a in (layer.weight, layer.bias)]
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def names(self) -> list[str]:
        out = [
            f"layer{i}.{part}" for i in range(len(self.layers)) for part in ("weight", "bias")
        ]
        if self.log_std is not None:
            out.append("log_std")
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "MlpParams":
        expected = self.arrays()
        if len(arrays) != len(expected):
            raise DomainError(
                f"expected {len(expected)} parameter arrays, got {len(arrays)}"
            )
        for name, old, new in zip(self.names(), expected, arrays):
            if np.shape(new) != old.shape:
                raise DomainError(f"{name}: shape {np.shape(new)} != {old.shape}")
        layers = tuple(
            DenseLayer(arrays[2 * i], arrays[2 * i + 1], layer.activation)
            for i, layer in enumerate(self.layers)
        )
        log_std = arrays[-1] if self.log_std is not None else None
        return MlpParams(layers=layers, log_std=log_std)

    def zeros_like(self) -> "MlpParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def init_mlp(
    rng: np.random.Generator,
    sizes: list[int],
    activation: str = "tanh",
    output_scale: float = 1.0,
    log_std: float | None = None,
) -> MlpParams:
    """Glorot-normal weights, zero biases, linear output layer."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        std = np.sqrt(2.0 / (fan_in + fan_out)) * (output_scale if last else 1.0)
        layers.append(
            DenseLayer(
                weight=rng.normal(0.0, std, size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
                activation="identity" if last else activation,
            )
        )
    log_std_arr = None if log_std is None else np.full(sizes[-1], float(log_std))
    return MlpParams(layers=tuple(layers), log_std=log_std_arr)


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Returns the output and the cache needed by `mlp_backward`."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.input_dim:
        raise DomainError(
            f"network expects {params.input_dim} inputs, got {x.shape[-1]}"
        )
    cache = []
    h = x
    for layer in params.layers:
        z = h @ layer.weight + layer.bias
        y = _ACTIVATIONS[layer.activation][0](z)
        cache.append((h, z, y))
        h = y
    return h, cache


def mlp_backward(params: MlpParams, cache: list, grad_out: np.ndarray) -> MlpParams:
    """Gradients of a scalar loss w.r.t. every weight and bias.

    `grad_out` is dL/d(output) with the same batch layout as the forward
    input. The returned log_std gradient (if any) is zero; callers add theirs.
    """
    grads = []
    delta = grad_out
    for layer, (h, z, y) in zip(reversed(params.layers), reversed(cache)):
        dz = delta * _ACTIVATIONS[layer.activation][1](z, y)
        h2 = h.reshape(-1, h.shape[-1])
        dz2 = dz.reshape(-1, dz.shape[-1])
        grads.append(DenseLayer(h2.T @ dz2, dz2.sum(axis=0), layer.activation))
        delta = dz @ layer.weight.T
    log_std = None if params.log_std is None else np.zeros_like(params.log_std)
    return MlpParams(layers=tuple(reversed(grads)), log_std=log_std)


def clamped_log_std(params: MlpParams) -> np.ndarray:
    return np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)


def policy_forward(params: MlpParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation of the diagonal Gaussian policy."""
    if params.log_std is None:
        raise DomainError("policy parameters need a log_std vector")
    mean, _ = mlp_forward(params, obs)
    std = np.broadcast_to(np.exp(clamped_log_std(params)), mean.shape)
    return mean, std


def value_forward(params: MlpParams, obs: np.ndarray) -> np.ndarray:
    value, _ = mlp_forward(params, obs)
    return value[..., 0]


def global_norm(arrays: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(np.sum(a**2) for a in arrays)))


def clip_by_global_norm(
    arrays: list[np.ndarray], max_norm: float
) -> tuple[list[np.ndarray], float]:
    norm = global_norm(arrays)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [a * scale for a in arrays], norm
    return arrays, norm


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_update(
    params: MlpParams,
    grads: MlpParams,
    learning_rate: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> MlpParams:
    """One Adam step; `state` is advanced in place."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(p_arrays) != len(g_arrays) or any(
        p.shape != g.shape for p, g in zip(p_arrays, g_arrays)
    ):
        raise DomainError("gradient shapes do not match parameter shapes")
    if not state.m:
        state.m = [np.zeros_like(p) for p in p_arrays]
        state.v = [np.zeros_like(p) for p in p_arrays]
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    updated = []
    for i, (p, g) in enumerate(zip(p_arrays, g_arrays)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g**2
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        updated.append(p - learning_rate * m_hat / (np.sqrt(v_hat) + eps))
    return params.with_arrays(updated)
