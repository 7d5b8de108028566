"""Corridor partitions and exponential-clock discrete occupation measures."""
from dataclasses import dataclass
from typing import Literal, Tuple, Union

import numpy as np

import config
from config import DEFAULT_BAND_MULTIPLIER, NODE_FLOOR_FRACTION
from engine.schemas import OccupationError, PartitionError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class CorridorPartition:
    """
    Nodes x_1 < ... < x_M and the corridors C_m = [x_m - eps_{m-1}, x_m + eps_m).

    eps_m = (x_{m+1} - x_m) / 2, with eps_0 = x_1 and eps_M = inf, so the
    corridors are disjoint and cover [0, inf). Boundaries between corridors
    are the node midpoints; a point on a boundary belongs to the upper corridor.
    """
    nodes: np.ndarray

    def __post_init__(self) -> None:
        nodes = np.array(self.nodes, dtype=float).reshape(-1)
        if nodes.size == 0:
            raise PartitionError("partition needs at least one node")
        if nodes[0] <= 0 or np.any(np.diff(nodes) <= 0):
            raise PartitionError("nodes must be positive and strictly ascending")
        nodes.setflags(write=False)
        boundaries = 0.5 * (nodes[1:] + nodes[:-1])
        boundaries.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "boundaries", boundaries)

    @property
    def size(self) -> int:
        return int(self.nodes.size)

    @property
    def half_widths(self) -> np.ndarray:
        """eps_0 .. eps_M (length M + 1)."""
        inner = 0.5 * np.diff(self.nodes)
        return np.concatenate([[self.nodes[0]], inner, [np.inf]])

    def corridor(self, m: int) -> Tuple[float, float]:
        """Bounds [lower, upper) of corridor m (0-based)."""
        eps = self.half_widths
        return float(self.nodes[m] - eps[m]), float(self.nodes[m] + eps[m + 1])

    def locate(self, x: ArrayLike) -> Union[int, np.ndarray]:
        """0-based index of the corridor containing each x >= 0 (binary search)."""
        idx = np.searchsorted(self.boundaries, x, side="right")
        return int(idx) if np.ndim(idx) == 0 else idx


def build_partition(
    x0: float,
    sigma_ref: float,
    horizon: float,
    corridors: int,
    band_multiplier: float = DEFAULT_BAND_MULTIPLIER,
    floor_fraction: float = NODE_FLOOR_FRACTION,
) -> CorridorPartition:
    """
    Equally spaced nodes on x0 * (1 -/+ band_multiplier * sigma_ref * sqrt(T)).

    Nodes below floor_fraction * x0 are lifted to that floor. A single
    corridor sits at x0 and covers the whole half-line.

    Args:
        x0: Spot
        sigma_ref: Reference vol (at-the-money forward vol at T)
        horizon: T in years
        corridors: M
        band_multiplier: Width of the band in standard deviations
        floor_fraction: Smallest node as a fraction of x0

    Returns:
        CorridorPartition

    Raises:
        PartitionError: If inputs are invalid or the floor collapses nodes
    """
    if corridors < 1:
        raise PartitionError(f"need at least one corridor, got {corridors}")
    if x0 <= 0 or sigma_ref <= 0 or horizon <= 0:
        raise PartitionError("x0, sigma_ref and horizon must be positive")
    if corridors == 1:
        return CorridorPartition(nodes=np.array([x0]))

    half_band = band_multiplier * sigma_ref * np.sqrt(horizon)
    nodes = np.linspace(x0 * (1 - half_band), x0 * (1 + half_band), corridors)
    nodes = np.maximum(nodes, floor_fraction * x0)
    if np.any(np.diff(nodes) <= 0):
        raise PartitionError(
            f"band lower edge {x0 * (1 - half_band):.6g} <= 0 collapses nodes after clipping; "
            f"reduce band_multiplier or corridors"
        )
    return CorridorPartition(nodes=nodes)


def gamma(kappa: float, t: float) -> float:
    """
    Inverse total mass of the continuous occupation flow: kappa / (e^{kappa t} - 1), 1/t at kappa = 0.

    Raises:
        OccupationError: If t <= 0
    """
    if t <= 0:
        raise OccupationError(f"gamma is undefined at t={t}")
    if kappa == 0:
        return 1.0 / t
    return float(kappa / np.expm1(kappa * t))


def clock_weight(kappa: float, t: float, dt: float) -> float:
    """Occupation increment e^{kappa t} dt of one Euler step."""
    return float(np.exp(kappa * t) * dt)


@dataclass
class DiscreteOccupation:
    """
    Occupation times O in R^M (or R^{J x M} for a batch of paths).

    ``mass`` is the common total mass sum_j e^{kappa t_j} dt accumulated in
    step order; it never depends on the path.
    """
    partition: CorridorPartition
    times: np.ndarray
    kappa: float = 0.0
    mass: float = 0.0

    @classmethod
    def empty(cls, partition: CorridorPartition, kappa: float, paths: int = 0) -> "DiscreteOccupation":
        shape = (paths, partition.size) if paths else (partition.size,)
        return cls(partition=partition, times=np.zeros(shape), kappa=kappa, mass=0.0)

    @property
    def row_mass(self) -> np.ndarray:
        return self.times.sum(axis=-1)


def accumulate(occ: DiscreteOccupation, x: ArrayLike, t: float, dt: float) -> DiscreteOccupation:
    """
    Add e^{kappa t} dt to the corridor containing x (per path), in place.

    Args:
        occ: Occupation state, single path (M,) or batch (J, M)
        x: Current price(s), one per path
        t: Current time t_n
        dt: Step size

    Returns:
        The same occupation object, updated
    """
    if dt <= 0:
        raise OccupationError(f"dt must be positive, got {dt}")
    increment = clock_weight(occ.kappa, t, dt)
    idx = occ.partition.locate(x)
    if occ.times.ndim == 1:
        occ.times[idx] += increment
    else:
        occ.times[np.arange(occ.times.shape[0]), idx] += increment
    occ.mass += increment
    return occ


def barycenter(occ: DiscreteOccupation, transform: Literal["identity", "log"] = "identity") -> ArrayLike:
    """
    Occupation-weighted mean of f(x_m), f = id or ln (the discrete EMA).

    Raises:
        OccupationError: If the measure has zero mass
    """
    nodes = occ.partition.nodes
    values = np.log(nodes) if transform == "log" else nodes
    mass = occ.row_mass
    if np.any(mass <= 0):
        raise OccupationError("barycenter of an empty occupation measure")
    out = occ.times @ values / mass
    return float(out) if np.ndim(out) == 0 else out


def pair_against(times: Union[DiscreteOccupation, np.ndarray], ell_values: np.ndarray, projected: np.ndarray) -> ArrayLike:
    """
    Discrete pairing sum_m ell_m (O_m - O_hat_m), row-wise for batches.

    Raises:
        OccupationError: On shape mismatch
    """
    if isinstance(times, DiscreteOccupation):
        times = times.times
    times = np.asarray(times, dtype=float)
    ell_values = np.asarray(ell_values, dtype=float)
    projected = np.asarray(projected, dtype=float)
    if times.shape != projected.shape or ell_values.shape[-1] != times.shape[-1]:
        raise OccupationError(
            f"shape mismatch: O {times.shape}, projected {projected.shape}, ell {ell_values.shape}"
        )
    out = np.sum(ell_values * (times - projected), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def ema_of_path(spots: np.ndarray, times: np.ndarray, kappa: float, dt: float, transform: str = "identity") -> float:
    """
    Exponentially weighted average of a sampled path, weights e^{kappa t_j} dt.

    This is the barycenter of the undiscretized occupation measure; comparing
    it with ``barycenter`` measures the corridor rounding.
    """
    spots = np.asarray(spots, dtype=float)
    values = np.log(spots) if transform == "log" else spots
    weights = np.exp(kappa * np.asarray(times, dtype=float)) * dt
    return float(np.sum(weights * values) / np.sum(weights))


def band_edges(corridors: int, bands: int = config.LSMC_BANDS) -> np.ndarray:
    """
    0-based corridor offsets of the aggregate bands A_1..A_bands.

    Band n covers corridors [edges[n-1], edges[n]) with edges[n] = floor(n * M / bands),
    so the bands are disjoint and cover every corridor (some may be empty when M < bands).
    """
    return np.array([(n * corridors) // bands for n in range(bands + 1)], dtype=int)


def band_of_corridor(corridors: int, bands: int = config.LSMC_BANDS) -> np.ndarray:
    """Band index (0-based) of every corridor."""
    edges = band_edges(corridors, bands)
    return np.searchsorted(edges, np.arange(corridors), side="right") - 1


def aggregate_bands(times: np.ndarray, bands: int = config.LSMC_BANDS) -> np.ndarray:
    """Occupation times O(A_n) summed over each band, shape (..., bands)."""
    times = np.asarray(times, dtype=float)
    edges = band_edges(times.shape[-1], bands)
    cumulative = np.concatenate([np.zeros(times.shape[:-1] + (1,)), np.cumsum(times, axis=-1)], axis=-1)
    return cumulative[..., edges[1:]] - cumulative[..., edges[:-1]]
