"""
Occupation sensitivity functions l(t, X_t, x).

Parametric families (zero, constant, one-factor corridor, tanh, EMA-log) and a
feedforward network with hand-written reverse mode, plus the Adam optimizer
and theta checkpoints.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

import config
from engine.occupation import CorridorPartition
from engine.schemas import SensitivityConfig, SensitivityError
from services.localvol import LocalVolSurface, min_local_variance
from utils.io_utils import read_json, write_json
from utils.logging_utils import get_logger

logger = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]

# Rows of (t, X, x) per network pass; bounds hidden-activation memory.
NETWORK_CHUNK_ROWS = 1 << 16


class SensitivitySpec(ABC):
    """
    A sensitivity l(t, X_t, x), in variance units (or dimensionless when
    used multiplicatively).

    Subclasses provide the batch evaluation over paths and corridor nodes and
    the derivative in the spot argument X_t, which the pathwise gradient needs.
    """

    name: str = "base"

    @abstractmethod
    def eval_batch(self, t: float, spots: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        """Matrix l(t, spots[j], nodes[m]) of shape (J, M)."""

    @abstractmethod
    def spot_gradient_batch(self, t: float, spots: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        """Matrix d l / d X_t at (t, spots[j], nodes[m]), shape (J, M)."""

    def eval(self, t: float, spot: float, x: float) -> float:
        return float(self.eval_batch(t, np.array([spot], dtype=float), np.array([x], dtype=float))[0, 0])

    @property
    def parameters(self) -> np.ndarray:
        """Real parameters, in the order ``with_parameters`` consumes them."""
        return np.zeros(0)

    def with_parameters(self, values: Sequence[float]) -> "SensitivitySpec":
        if len(values):
            raise SensitivityError(f"{self.name} has no parameters")
        return self

    def parameter_vjp(self, t: float, spots: np.ndarray, nodes: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """sum_{j,m} upstream[j, m] * d l(t, spots[j], nodes[m]) / d parameters."""
        return np.zeros(0)

    @property
    def is_zero(self) -> bool:
        return False

    @property
    def depends_on_occupation(self) -> bool:
        """Whether the variance can differ between paths at the same (t, X_t)."""
        return not self.is_zero


def _grid(spots: np.ndarray, nodes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    spots = np.asarray(spots, dtype=float).reshape(-1, 1)
    nodes = np.asarray(nodes, dtype=float).reshape(1, -1)
    return spots, nodes


@dataclass(frozen=True)
class Zero(SensitivitySpec):
    """l = 0: the LOV model collapses to local volatility."""
    name = "zero"

    def eval_batch(self, t, spots, nodes):
        return np.zeros((np.size(spots), np.size(nodes)))

    def spot_gradient_batch(self, t, spots, nodes):
        return np.zeros((np.size(spots), np.size(nodes)))

    @property
    def is_zero(self) -> bool:
        return True


@dataclass(frozen=True)
class Constant(SensitivitySpec):
    """l = c for every x; the centred occupation pairing cancels it exactly."""
    value: float = 0.0
    name = "constant"

    def eval_batch(self, t, spots, nodes):
        return np.full((np.size(spots), np.size(nodes)), float(self.value))

    def spot_gradient_batch(self, t, spots, nodes):
        return np.zeros((np.size(spots), np.size(nodes)))

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.value])

    def with_parameters(self, values):
        return replace(self, value=float(values[0]))

    def parameter_vjp(self, t, spots, nodes, upstream):
        return np.array([np.sum(upstream)])

    @property
    def depends_on_occupation(self) -> bool:
        return False


@dataclass(frozen=True)
class OneFactorCorridor(SensitivitySpec):
    """
    l = beta * 1_A(x), A a union of price intervals [lower, upper).

    In multiplicative use |beta| < 1/2 keeps 1 + gamma * pairing positive.
    """
    beta: float
    intervals: Tuple[Tuple[float, float], ...]
    multiplicative: bool = False
    name = "one_factor"

    def __post_init__(self) -> None:
        if self.multiplicative and abs(self.beta) >= 0.5:
            raise SensitivityError(f"multiplicative one-factor LOV needs |beta| < 1/2, got {self.beta}")
        for lower, upper in self.intervals:
            if not lower < upper:
                raise SensitivityError(f"empty corridor interval [{lower}, {upper})")

    @classmethod
    def from_corridors(
        cls,
        partition: CorridorPartition,
        corridors: Sequence[int],
        beta: float,
        multiplicative: bool = False,
    ) -> "OneFactorCorridor":
        """Build A as the union of the given partition corridors (0-based)."""
        bad = [m for m in corridors if not 0 <= m < partition.size]
        if bad:
            raise SensitivityError(f"corridor indices {bad} outside 0..{partition.size - 1}")
        intervals = tuple(partition.corridor(m) for m in sorted(set(corridors)))
        return cls(beta=float(beta), intervals=intervals, multiplicative=multiplicative)

    def indicator(self, x: ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        inside = np.zeros(x.shape, dtype=bool)
        for lower, upper in self.intervals:
            inside |= (x >= lower) & (x < upper)
        return inside

    def eval_batch(self, t, spots, nodes):
        row = self.beta * self.indicator(nodes).astype(float)
        return np.broadcast_to(row, (np.size(spots), np.size(nodes))).copy()

    def spot_gradient_batch(self, t, spots, nodes):
        return np.zeros((np.size(spots), np.size(nodes)))

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.beta])

    def with_parameters(self, values):
        return replace(self, beta=float(values[0]))

    def parameter_vjp(self, t, spots, nodes, upstream):
        row = self.indicator(nodes).astype(float)
        return np.array([np.sum(np.atleast_2d(upstream) * row)])


@dataclass(frozen=True)
class Tanh(SensitivitySpec):
    """
    l = scale * tanh(alpha * x / X_t).

    With scale <= sigma_min^2 / 4 the correction stays strictly below half the
    smallest local variance, so total variance remains positive.
    """
    scale: float
    alpha: float = 1.0
    name = "tanh"

    def __post_init__(self) -> None:
        if self.scale < 0 or not np.isfinite(self.scale):
            raise SensitivityError(f"tanh scale must be finite and >= 0, got {self.scale}")

    @classmethod
    def for_surface(cls, surface: LocalVolSurface, horizon: float, alpha: float = 1.0) -> "Tanh":
        """Largest admissible scale, a quarter of the minimum local variance on [0, horizon]."""
        return cls(scale=0.25 * min_local_variance(surface, horizon), alpha=alpha)

    def validate_against(self, surface: LocalVolSurface, horizon: float) -> "Tanh":
        bound = 0.25 * min_local_variance(surface, horizon)
        if self.scale > bound * (1 + 1e-12):
            raise SensitivityError(
                f"tanh scale {self.scale:.6g} exceeds a quarter of the minimum local variance ({bound:.6g})"
            )
        return self

    def eval_batch(self, t, spots, nodes):
        spots, nodes = _grid(spots, nodes)
        return self.scale * np.tanh(self.alpha * nodes / spots)

    def spot_gradient_batch(self, t, spots, nodes):
        spots, nodes = _grid(spots, nodes)
        u = self.alpha * nodes / spots
        return self.scale * (1.0 - np.tanh(u) ** 2) * (-u / spots)

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.scale, self.alpha])

    def with_parameters(self, values):
        return replace(self, scale=float(values[0]), alpha=float(values[1]))

    def parameter_vjp(self, t, spots, nodes, upstream):
        spots, nodes = _grid(spots, nodes)
        upstream = np.atleast_2d(upstream)
        ratio = nodes / spots
        th = np.tanh(self.alpha * ratio)
        d_scale = np.sum(upstream * th)
        d_alpha = np.sum(upstream * self.scale * (1.0 - th ** 2) * ratio)
        return np.array([d_scale, d_alpha])


@dataclass(frozen=True)
class EmaLog(SensitivitySpec):
    """l = beta * ln x; the pairing becomes beta times the EMA log-price gap."""
    beta: float
    name = "ema_log"

    def eval_batch(self, t, spots, nodes):
        row = self.beta * np.log(np.asarray(nodes, dtype=float))
        return np.broadcast_to(row, (np.size(spots), np.size(nodes))).copy()

    def spot_gradient_batch(self, t, spots, nodes):
        return np.zeros((np.size(spots), np.size(nodes)))

    @property
    def parameters(self) -> np.ndarray:
        return np.array([self.beta])

    def with_parameters(self, values):
        return replace(self, beta=float(values[0]))

    def parameter_vjp(self, t, spots, nodes, upstream):
        row = np.log(np.asarray(nodes, dtype=float))
        return np.array([np.sum(np.atleast_2d(upstream) * row)])


# ---------------------------------------------------------------------------
# Feedforward network
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NeuralParams:
    """
    Flattened weights of a ReLU network with a softplus output.

    theta holds, for each layer, the (fan_in, fan_out) weight matrix in
    row-major order followed by its bias, then one trailing output shift when
    ``output_shift`` is set. Inputs are normalised to (t / T, X / x0, x / x0).
    """
    layer_sizes: Tuple[int, ...]
    theta: np.ndarray
    horizon: float
    x0: float
    output_scale: float = 1.0
    output_shift: bool = False
    seed: int = config.NETWORK_INIT_SEED

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or sizes[0] != 3 or sizes[-1] != 1:
            raise SensitivityError(f"layer sizes must run from 3 inputs to 1 output, got {sizes}")
        theta = np.array(self.theta, dtype=float).reshape(-1)
        expected = parameter_count(sizes) + int(self.output_shift)
        if theta.size != expected:
            raise SensitivityError(f"theta has {theta.size} entries, network needs {expected}")
        if self.horizon <= 0 or self.x0 <= 0:
            raise SensitivityError("normalisation constants must be positive")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "theta", theta)

    @property
    def size(self) -> int:
        return int(self.theta.size)

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into theta, one pair per layer."""
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = self.theta[offset: offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.theta[offset: offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    @property
    def shift(self) -> float:
        return float(self.theta[-1]) if self.output_shift else 0.0

    def with_theta(self, theta: np.ndarray) -> "NeuralParams":
        return replace(self, theta=np.array(theta, dtype=float))


def parameter_count(layer_sizes: Sequence[int]) -> int:
    """Weights plus biases: 4481 for [3, 64, 64, 1]."""
    return int(sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:])))


def init_params(
    horizon: float,
    x0: float,
    layer_sizes: Sequence[int] = tuple(config.NETWORK_LAYER_SIZES),
    seed: int = config.NETWORK_INIT_SEED,
    output_scale: float = 1.0,
    output_shift: bool = False,
) -> NeuralParams:
    """Glorot-uniform weights, zero biases, zero shift."""
    rng = np.random.default_rng(seed)
    pieces = []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        pieces.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        pieces.append(np.zeros(fan_out))
    if output_shift:
        pieces.append(np.zeros(1))
    return NeuralParams(
        layer_sizes=tuple(layer_sizes),
        theta=np.concatenate(pieces),
        horizon=horizon,
        x0=x0,
        output_scale=output_scale,
        output_shift=output_shift,
        seed=seed,
    )


def _normalise(params: NeuralParams, inputs: np.ndarray) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    return inputs / np.array([params.horizon, params.x0, params.x0])


def _forward(params: NeuralParams, inputs: np.ndarray):
    """Output and the per-layer cache (layer inputs, pre-activations)."""
    h = _normalise(params, inputs)
    cache = []
    layers = params.layers()
    for k, (w, b) in enumerate(layers):
        z = h @ w + b
        cache.append((h, z))
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
    out = params.output_scale * np.logaddexp(0.0, h[:, 0]) + params.shift
    return out, cache


def _backward(params: NeuralParams, cache, upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """theta gradient and raw-input gradient (rows of d out / d (t, X, x) times upstream)."""
    layers = params.layers()
    z_last = cache[-1][1]
    delta = (upstream * params.output_scale * expit(z_last[:, 0]))[:, None]
    grads: List[np.ndarray] = []
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        h_in, _ = cache[k]
        grads.append(delta.sum(axis=0))
        grads.append((h_in.T @ delta).reshape(-1))
        delta = delta @ w.T
        if k > 0:
            delta = delta * (cache[k - 1][1] > 0)
    grads.reverse()
    theta_grad = np.concatenate(grads)
    if params.output_shift:
        theta_grad = np.concatenate([theta_grad, [float(np.sum(upstream))]])
    input_grad = delta / np.array([params.horizon, params.x0, params.x0])
    return theta_grad, input_grad


def network_forward(params: NeuralParams, inputs: np.ndarray) -> np.ndarray:
    """Network output for raw (t, X, x) rows, evaluated in chunks."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    out = np.empty(inputs.shape[0])
    for start in range(0, inputs.shape[0], NETWORK_CHUNK_ROWS):
        stop = start + NETWORK_CHUNK_ROWS
        out[start:stop] = _forward(params, inputs[start:stop])[0]
    return out


def vjp(params: NeuralParams, inputs: np.ndarray, upstream: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vector-Jacobian product of the network over a batch.

    Args:
        params: Network parameters
        inputs: Raw (t, X, x) rows, shape (K, 3)
        upstream: dLoss/dOutput per row, shape (K,)

    Returns:
        (theta gradient summed over rows, input gradient per row (K, 3))

    Raises:
        SensitivityError: If upstream has non-finite entries
    """
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    upstream = np.asarray(upstream, dtype=float).reshape(-1)
    if upstream.shape[0] != inputs.shape[0]:
        raise SensitivityError(f"{inputs.shape[0]} inputs but {upstream.shape[0]} upstream values")
    if not np.all(np.isfinite(upstream)):
        raise SensitivityError("non-finite upstream gradient")
    theta_grad = np.zeros(params.size)
    input_grad = np.empty_like(inputs)
    for start in range(0, inputs.shape[0], NETWORK_CHUNK_ROWS):
        stop = start + NETWORK_CHUNK_ROWS
        _, cache = _forward(params, inputs[start:stop])
        g_theta, g_in = _backward(params, cache, upstream[start:stop])
        theta_grad += g_theta
        input_grad[start:stop] = g_in
    return theta_grad, input_grad


def backprop(params: NeuralParams, inputs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of sum_k upstream_k * output_k with respect to theta."""
    return vjp(params, inputs, upstream)[0]


def _batch_inputs(t: float, spots: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    spots = np.asarray(spots, dtype=float).reshape(-1)
    nodes = np.asarray(nodes, dtype=float).reshape(-1)
    grid_spots = np.repeat(spots, nodes.size)
    grid_nodes = np.tile(nodes, spots.size)
    return np.column_stack([np.full(grid_spots.size, float(t)), grid_spots, grid_nodes])


@dataclass(frozen=True, eq=False)
class Neural(SensitivitySpec):
    """l = network(t / T, X / x0, x / x0; theta), nonnegative unless an output shift is learned."""
    params: NeuralParams
    name = "neural"

    def eval_batch(self, t, spots, nodes):
        out = network_forward(self.params, _batch_inputs(t, spots, nodes))
        return out.reshape(np.size(spots), np.size(nodes))

    def spot_gradient_batch(self, t, spots, nodes):
        inputs = _batch_inputs(t, spots, nodes)
        _, input_grad = vjp(self.params, inputs, np.ones(inputs.shape[0]))
        return input_grad[:, 1].reshape(np.size(spots), np.size(nodes))

    def parameter_vjp(self, t, spots, nodes, upstream):
        inputs = _batch_inputs(t, spots, nodes)
        return vjp(self.params, inputs, np.asarray(upstream, dtype=float).reshape(-1))[0]

    @property
    def parameters(self) -> np.ndarray:
        return self.params.theta

    def with_parameters(self, values):
        return Neural(params=self.params.with_theta(values))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AdamState:
    """Adam moments, step count and hyperparameters."""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    learning_rate: float = config.ADAM_LEARNING_RATE
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    epsilon: float = config.ADAM_EPSILON

    @classmethod
    def zeros(cls, size: int, **hyper) -> "AdamState":
        return cls(first_moment=np.zeros(size), second_moment=np.zeros(size), **hyper)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> Tuple[AdamState, np.ndarray]:
    """
    One bias-corrected Adam update; returns the new state and theta, inputs untouched.

    Raises:
        SensitivityError: If the vector lengths disagree or grad is not finite
    """
    theta = np.asarray(theta, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (theta.shape == grad.shape == state.first_moment.shape):
        raise SensitivityError(
            f"Adam length mismatch: theta {theta.shape}, grad {grad.shape}, state {state.first_moment.shape}"
        )
    if not np.all(np.isfinite(grad)):
        raise SensitivityError("non-finite gradient passed to Adam")
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1 - state.beta2) * grad ** 2
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    new_theta = theta - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, first_moment=m, second_moment=v, step=step), new_theta


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_checkpoint(path: Union[str, Path], params: NeuralParams) -> Path:
    """Write theta as one %.17g value per line plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, params.theta, fmt="%.17g")
    write_json(
        _sidecar(path),
        {
            "layer_sizes": list(params.layer_sizes),
            "activations": {"hidden": "relu", "output": "softplus"},
            "normalization": {"horizon": params.horizon, "x0": params.x0},
            "output_scale": params.output_scale,
            "output_shift": params.output_shift,
            "seed": params.seed,
            "parameters": params.size,
        },
    )
    return path


def load_checkpoint(path: Union[str, Path]) -> NeuralParams:
    """
    Read a theta checkpoint written by save_checkpoint.

    Raises:
        FileNotFoundError: If the file or its sidecar is missing
        SensitivityError: If the sidecar does not match theta
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    meta = read_json(_sidecar(path))
    theta = np.atleast_1d(np.loadtxt(path, dtype=float))
    try:
        return NeuralParams(
            layer_sizes=tuple(meta["layer_sizes"]),
            theta=theta,
            horizon=float(meta["normalization"]["horizon"]),
            x0=float(meta["normalization"]["x0"]),
            output_scale=float(meta.get("output_scale", 1.0)),
            output_shift=bool(meta.get("output_shift", False)),
            seed=int(meta.get("seed", config.NETWORK_INIT_SEED)),
        )
    except KeyError as e:
        raise SensitivityError(f"checkpoint sidecar missing {str(e)}")


# ---------------------------------------------------------------------------
# Factory
# ---------------------------------------------------------------------------

def build_sensitivity(
    spec_config: SensitivityConfig,
    surface: Optional[LocalVolSurface] = None,
    partition: Optional[CorridorPartition] = None,
    horizon: float = 1.0,
    x0: float = 1.0,
    multiplicative: bool = False,
) -> SensitivitySpec:
    """
    Instantiate the configured sensitivity family.

    Args:
        spec_config: Parsed sensitivity configuration
        surface: Local vol surface (tanh scale default and bound)
        partition: Corridor partition (one-factor index set)
        horizon: Simulation horizon T (tanh bound, network normalisation)
        x0: Spot (network normalisation)
        multiplicative: Whether l enters multiplicatively

    Returns:
        SensitivitySpec

    Raises:
        SensitivityError: If the configuration is inconsistent
    """
    variant = spec_config.variant
    if variant == "zero":
        return Zero()
    if variant == "constant":
        return Constant(value=spec_config.value)
    if variant == "ema_log":
        return EmaLog(beta=spec_config.beta)
    if variant == "one_factor":
        if partition is None:
            raise SensitivityError("one_factor needs a corridor partition")
        corridors = spec_config.corridors or list(range(partition.size // 2 + 1, partition.size))
        return OneFactorCorridor.from_corridors(partition, corridors, spec_config.beta, multiplicative)
    if variant == "tanh":
        if surface is None:
            raise SensitivityError("tanh needs a local vol surface")
        if spec_config.scale is None:
            return Tanh.for_surface(surface, horizon, spec_config.alpha)
        return Tanh(scale=spec_config.scale, alpha=spec_config.alpha).validate_against(surface, horizon)
    if variant == "neural":
        if spec_config.checkpoint:
            params = load_checkpoint(spec_config.checkpoint)
            logger.info(f"Loaded network checkpoint {spec_config.checkpoint} ({params.size} parameters)")
        else:
            net = spec_config.network
            params = init_params(
                horizon=horizon,
                x0=x0,
                layer_sizes=(3, *net.hidden_sizes, 1),
                seed=net.seed,
                output_scale=net.output_scale,
                output_shift=net.output_shift,
            )
        return Neural(params=params)
    raise SensitivityError(f"unknown sensitivity variant {variant!r}")
