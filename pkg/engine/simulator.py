"""
Particle simulation of occupied SDEs.

Log-Euler paths of the LOV model with the projected occupation estimated by
Nadaraya-Watson regression across particles, the trend-following toy model, and
the backward sweep that differentiates a simulated ensemble with respect to
the sensitivity parameters.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

import config
from engine.occupation import CorridorPartition, band_of_corridor, clock_weight
from engine.lov_model import LovModel
from engine.schemas import MarketEnvironment, SimConfig, SimulationError
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

# Sorted particles are projected in row blocks of this size.
PROJECTION_BLOCK = 512


# ---------------------------------------------------------------------------
# Kernel projection
# ---------------------------------------------------------------------------

def quartic_kernel(delta: np.ndarray, h: float) -> np.ndarray:
    """15/16 (1 - (delta/h)^2)^2 / h on |delta| < h, zero elsewhere."""
    if h <= 0:
        raise SimulationError(f"kernel bandwidth must be positive, got {h}")
    u = np.asarray(delta, dtype=float) / h
    out = np.where(np.abs(u) < 1.0, 0.9375 * (1.0 - u ** 2) ** 2 / h, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def bandwidth(spots: np.ndarray, multiplier: float = config.BANDWIDTH_MULTIPLIER) -> float:
    """
    Silverman-type bandwidth multiplier * sd(X) * J^(-1/5).

    Floored at 1e-8 * mean(X), which is also the value for identical particles.
    """
    spots = np.asarray(spots, dtype=float)
    if spots.size < 2:
        raise SimulationError(f"bandwidth needs at least 2 particles, got {spots.size}")
    floor = config.BANDWIDTH_FLOOR_FRACTION * float(np.mean(spots))
    h = multiplier * float(np.std(spots)) * spots.size ** (-0.2)
    return max(h, floor)


@dataclass(frozen=True, eq=False)
class ProjectionEstimate:
    """Projected occupation O_hat (J x M) and the bandwidth it used."""
    projected: np.ndarray
    bandwidth: float


def _project_block(
    start: int,
    stop: int,
    sorted_spots: np.ndarray,
    sorted_times: np.ndarray,
    h: float,
) -> np.ndarray:
    rows = sorted_spots[start:stop]
    lo = int(np.searchsorted(sorted_spots, rows[0] - h, side="right"))
    hi = int(np.searchsorted(sorted_spots, rows[-1] + h, side="left"))
    weights = quartic_kernel(rows[:, None] - sorted_spots[None, lo:hi], h)
    totals = weights.sum(axis=1)
    block = weights @ sorted_times[lo:hi]
    # Degenerate rows keep their own occupation.
    empty = totals <= 0
    totals = np.where(empty, 1.0, totals)
    out = block / totals[:, None]
    if np.any(empty):
        out[empty] = sorted_times[start:stop][empty]
    return out


def project_occupation(
    times: np.ndarray,
    spots: np.ndarray,
    h: float,
    workers: int = 1,
) -> ProjectionEstimate:
    """
    Nadaraya-Watson estimate of E[O | X] at every particle.

    O_hat_j = sum_j' psi(X_j - X_j') O_j' / sum_j' psi(X_j - X_j'), self-weight
    included. Particles are sorted so each row block only touches neighbours
    inside the kernel support; blocks are independent and may run on a thread
    pool, each writing its own rows, so the result does not depend on workers.

    Args:
        times: Occupation times O, shape (J, M)
        spots: Particle positions X_{t_n}, shape (J,)
        h: Kernel bandwidth
        workers: Thread count for row blocks

    Returns:
        ProjectionEstimate
    """
    times = np.atleast_2d(np.asarray(times, dtype=float))
    spots = np.asarray(spots, dtype=float).reshape(-1)
    if times.shape[0] != spots.size:
        raise SimulationError(f"{times.shape[0]} occupation rows but {spots.size} particles")
    if h <= 0:
        raise SimulationError(f"kernel bandwidth must be positive, got {h}")
    order = np.argsort(spots, kind="stable")
    sorted_spots = spots[order]
    sorted_times = times[order]
    blocks = [(s, min(s + PROJECTION_BLOCK, spots.size)) for s in range(0, spots.size, PROJECTION_BLOCK)]

    def run(block: Tuple[int, int]) -> np.ndarray:
        return _project_block(block[0], block[1], sorted_spots, sorted_times, h)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pieces = list(pool.map(run, blocks))
    else:
        pieces = [run(b) for b in blocks]

    projected = np.empty_like(times)
    projected[order] = np.concatenate(pieces, axis=0)
    return ProjectionEstimate(projected=projected, bandwidth=h)


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

def step_normals(seed: int, step: int, paths: int) -> np.ndarray:
    """
    Antithetic standard normals for one step: Z[J/2:] = -Z[:J/2].

    A Philox stream keyed by (seed, step) makes the draws independent of how
    work is scheduled.
    """
    if paths % 2:
        raise SimulationError(f"antithetic draws need an even path count, got {paths}")
    generator = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step])))
    half = generator.standard_normal(paths // 2)
    return np.concatenate([half, -half])


def _step_draws(draws: Optional[np.ndarray], seed: int, step: int, paths: int) -> np.ndarray:
    if draws is None:
        return step_normals(seed, step, paths)
    return np.asarray(draws[:, step], dtype=float)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PathEnsemble:
    """
    J simulated paths on t_n = n * dt, n = 0..N.

    Path j and j + J/2 are antithetic partners. ``band_times`` holds the
    occupation O_{t_n}(A_b) of the aggregate bands at every step, which the
    exercise regressions use; the full occupation is kept at t = T only.
    """
    spots: np.ndarray  # (J, N + 1)
    vols: np.ndarray  # (J, N)
    draws: np.ndarray  # (J, N)
    occupation: np.ndarray  # (J, M) at t = T
    projected: np.ndarray  # (J, M) at t = T
    band_times: np.ndarray  # (J, N + 1, bands)
    masses: np.ndarray  # (N + 1,) common total mass before each step
    bandwidths: np.ndarray  # (N,) kernel bandwidth per step, 0 where not projected
    partition: CorridorPartition
    dt: float
    x0: float
    rate: float
    dividend_yield: float
    kappa: float
    seed: int
    clamp_events: int = 0
    runtime_seconds: float = 0.0
    path_dependent: bool = True  # false when paths are plain local vol (regressions drop the bands)

    @property
    def paths(self) -> int:
        return int(self.spots.shape[0])

    @property
    def steps(self) -> int:
        return int(self.vols.shape[1])

    @property
    def horizon(self) -> float:
        return self.steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def terminal(self) -> np.ndarray:
        return self.spots[:, -1]

    @property
    def final_mass(self) -> float:
        return float(self.masses[-1])

    def mass_residual(self) -> float:
        """Largest relative gap between a row sum of O or O_hat and the tracked mass at T."""
        mass = self.final_mass
        if mass <= 0:
            return 0.0
        gaps = np.concatenate([
            np.abs(self.occupation.sum(axis=1) - mass),
            np.abs(self.projected.sum(axis=1) - mass),
        ])
        return float(np.max(gaps) / mass)

    def step_index(self, t: float) -> int:
        """Nearest grid step to time t."""
        n = int(round(t / self.dt))
        if not 0 <= n <= self.steps:
            raise SimulationError(f"time {t} lies outside the simulated horizon {self.horizon}")
        return n

    def pair_split(self) -> Tuple[np.ndarray, np.ndarray]:
        half = self.paths // 2
        return np.arange(half), np.arange(half, self.paths)


def _check_finite(values: np.ndarray, what: str, step: int) -> None:
    bad = ~np.isfinite(values)
    if np.any(bad):
        path = int(np.flatnonzero(bad)[0])
        raise SimulationError(f"non-finite {what}", step=step, path=path)


def _run(
    sim: SimConfig,
    env: MarketEnvironment,
    partition: CorridorPartition,
    kappa: float,
    variance_step: Callable[[int, float, np.ndarray, np.ndarray, float, np.ndarray], np.ndarray],
    needs_projection: bool,
    draws: Optional[np.ndarray],
    workers: int,
    drift: Optional[float] = None,
) -> PathEnsemble:
    started = time.perf_counter()
    paths, steps, dt = sim.paths, sim.steps, sim.dt
    if draws is not None and np.shape(draws) != (paths, steps):
        raise SimulationError(f"draws must have shape ({paths}, {steps}), got {np.shape(draws)}")

    spots = np.empty((paths, steps + 1))
    spots[:, 0] = env.spot
    vols = np.empty((paths, steps))
    used_draws = np.empty((paths, steps))
    band_index = band_of_corridor(partition.size)
    band_times = np.zeros((paths, steps + 1, config.LSMC_BANDS))
    occupation = np.zeros((paths, partition.size))
    masses = np.zeros(steps + 1)
    bandwidths = np.zeros(steps)
    rows = np.arange(paths)
    drift = env.rate - env.dividend_yield if drift is None else drift
    mass = 0.0

    for n in range(steps):
        t = n * dt
        x = spots[:, n]
        if needs_projection and mass > 0:
            h = bandwidth(x, sim.bandwidth_multiplier)
            projected = project_occupation(occupation, x, h, workers).projected
            bandwidths[n] = h
        else:
            projected = occupation
        variance = variance_step(n, t, x, occupation, mass, projected)
        _check_finite(variance, "variance", n)
        sigma = np.sqrt(variance)
        z = _step_draws(draws, sim.seed, n, paths)
        spots[:, n + 1] = x * np.exp(sigma * np.sqrt(dt) * z + (drift - 0.5 * variance) * dt)
        _check_finite(spots[:, n + 1], "spot", n)
        vols[:, n] = sigma
        used_draws[:, n] = z

        increment = clock_weight(kappa, t, dt)
        corridor = partition.locate(x)
        occupation[rows, corridor] += increment
        band_times[:, n + 1] = band_times[:, n]
        band_times[rows, n + 1, band_index[corridor]] += increment
        mass += increment
        masses[n + 1] = mass
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(f"step {format_fields(step=n, t=t, mean_spot=float(np.mean(spots[:, n + 1])))}")

    x_final = spots[:, -1]
    if needs_projection and mass > 0:
        final_projected = project_occupation(occupation, x_final, bandwidth(x_final, sim.bandwidth_multiplier), workers).projected
    else:
        final_projected = occupation.copy()

    return PathEnsemble(
        spots=spots,
        vols=vols,
        draws=used_draws,
        occupation=occupation,
        projected=final_projected,
        band_times=band_times,
        masses=masses,
        bandwidths=bandwidths,
        partition=partition,
        dt=dt,
        x0=env.spot,
        rate=env.rate,
        dividend_yield=env.dividend_yield,
        kappa=kappa,
        seed=sim.seed,
        runtime_seconds=time.perf_counter() - started,
    )


def simulate_lov(
    sim: SimConfig,
    env: MarketEnvironment,
    model: LovModel,
    draws: Optional[np.ndarray] = None,
    workers: int = config.WORKERS,
) -> PathEnsemble:
    """
    Simulate the LOV model with the particle projection of the occupation.

    Each step projects O onto the current particles, evaluates the clamped
    LOV variance at (t_n, X_{t_n}), moves X by a log-Euler step and finally adds
    e^{kappa t_n} dt to the corridor holding X_{t_n}. At n = 0 the measure is
    empty and the variance is the local variance.

    Args:
        sim: Grid, path count and seed
        env: Spot and carry
        model: LOV model (surface, partition, sensitivity, clock, clamp)
        draws: Optional (J, N) normals replacing the seeded stream
        workers: Threads used by the projection

    Returns:
        PathEnsemble

    Raises:
        SimulationError: On a non-finite variance or spot (with step and path)
    """
    needs_projection = not model.spec.is_zero and not model.uncentered
    clamp_before = model.clamp_events

    def variance_step(n, t, x, occupation, mass, projected):
        return model.variance(t, x, occupation, projected, mass).variance

    ensemble = _run(sim, env, model.partition, model.kappa, variance_step, needs_projection, draws, workers)
    ensemble.clamp_events = model.clamp_events - clamp_before
    ensemble.path_dependent = model.spec.depends_on_occupation
    logger.info(
        f"LOV simulation done {format_fields(paths=sim.paths, steps=sim.steps, spec=model.spec.name, clamp_events=ensemble.clamp_events, seconds=ensemble.runtime_seconds)}"
    )
    if ensemble.clamp_events:
        logger.warning(f"{ensemble.clamp_events} variance clamp event(s) during simulation")
    return ensemble


def policy_seed(seed: int) -> int:
    """Seed of the ensemble an exercise policy is fitted on, independent of ``seed``'s own stream."""
    return int(np.random.SeedSequence(seed, spawn_key=(1,)).generate_state(1)[0])


def simulate_policy_ensemble(
    sim: SimConfig,
    env: MarketEnvironment,
    model: LovModel,
    workers: int = config.WORKERS,
) -> PathEnsemble:
    """Same grid and model as ``sim``, fresh draws: the regression paths for out-of-sample LSMC."""
    fit_sim = sim.model_copy(update={"seed": policy_seed(sim.seed), "record_paths": False})
    logger.debug(f"policy ensemble {format_fields(seed=fit_sim.seed, paths=fit_sim.paths)}")
    return simulate_lov(fit_sim, env, model, workers=workers)


# ---------------------------------------------------------------------------
# Trend-following toy model
# ---------------------------------------------------------------------------

def toy_sigma(trend: np.ndarray, alpha: float, beta: float, gamma_toy: float) -> np.ndarray:
    """Sigma(y) = -alpha / beta + gamma * y^(-beta), decreasing in the trend y."""
    return -alpha / beta + gamma_toy * np.power(np.asarray(trend, dtype=float), -beta)


def trend_ratio(spots: np.ndarray, occupation: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """X_t over the occupation barycenter; 1 while the measure is empty."""
    occupation = np.atleast_2d(occupation)
    mass = occupation.sum(axis=1)
    safe = np.where(mass > 0, mass, 1.0)
    centre = occupation @ nodes / safe
    return np.where(mass > 0, np.asarray(spots, dtype=float) / np.where(mass > 0, centre, 1.0), 1.0)


def simulate_guyon_toy(
    sim: SimConfig,
    env: MarketEnvironment,
    partition: CorridorPartition,
    alpha: float,
    beta: float,
    gamma_toy: float,
    kappa: float = config.DEFAULT_KAPPA,
    variance_floor: float = config.VARIANCE_FLOOR,
    variance_cap: float = config.VARIANCE_CAP,
    draws: Optional[np.ndarray] = None,
) -> PathEnsemble:
    """
    Simulate dX = sigma X dW with sigma = Sigma(X_t / barycenter(O_t)).

    The toy dynamics carry no drift; the environment only supplies x0 (and
    the rate stored for discounting).

    Sigma is clamped to [sqrt(floor), sqrt(cap)]; clamps are counted.

    Raises:
        SimulationError: If a parameter is not strictly positive, or on non-finite state
    """
    if min(alpha, beta, gamma_toy) <= 0:
        raise SimulationError("toy model parameters alpha, beta, gamma must be positive")
    vol_floor, vol_cap = np.sqrt(variance_floor), np.sqrt(variance_cap)
    clamps: List[int] = []

    def variance_step(n, t, x, occupation, mass, projected):
        sigma = toy_sigma(trend_ratio(x, occupation, partition.nodes), alpha, beta, gamma_toy)
        clamped = (sigma < vol_floor) | (sigma > vol_cap)
        clamps.append(int(np.count_nonzero(clamped)))
        return np.clip(sigma, vol_floor, vol_cap) ** 2

    ensemble = _run(sim, env, partition, kappa, variance_step, False, draws, workers=1, drift=0.0)
    ensemble.clamp_events = int(sum(clamps))
    logger.info(f"Toy simulation done {format_fields(paths=sim.paths, steps=sim.steps, clamp_events=ensemble.clamp_events)}")
    return ensemble


# ---------------------------------------------------------------------------
# Pathwise adjoint
# ---------------------------------------------------------------------------

def adjoint_sweep(
    model: LovModel,
    ensemble: PathEnsemble,
    spot_seeds: np.ndarray,
) -> np.ndarray:
    """
    Gradient of sum_{j,n} spot_seeds[j, n] * X_{t_n}(omega_j) with respect to the
    sensitivity parameters.

    The sweep runs backward over the recorded ensemble. Occupation times are
    recovered step by step by removing each increment, and the kernel weights
    are rebuilt from the recorded spots at the recorded bandwidths. Both O and
    O_hat are treated as parameter-independent (indicator occupation, frozen
    projection weights), so only the X recursion and the sensitivity
    evaluations carry derivatives.

    Args:
        model: The model that produced the ensemble
        ensemble: Recorded simulation
        spot_seeds: dObjective/dX_{t_n}, shape (J, N + 1)

    Returns:
        Parameter gradient (length of model.spec.parameters)
    """
    spec = model.spec
    grad = np.zeros(spec.parameters.size)
    if spec.is_zero or grad.size == 0:
        return grad
    spot_seeds = np.asarray(spot_seeds, dtype=float)
    if spot_seeds.shape != ensemble.spots.shape:
        raise SimulationError(f"spot seeds must have shape {ensemble.spots.shape}, got {spot_seeds.shape}")

    dt = ensemble.dt
    sqrt_dt = np.sqrt(dt)
    rows = np.arange(ensemble.paths)
    nodes = model.partition.nodes
    occupation = ensemble.occupation.copy()
    adjoint = spot_seeds[:, -1].copy()

    for n in range(ensemble.steps - 1, -1, -1):
        t = n * dt
        x = ensemble.spots[:, n]
        x_next = ensemble.spots[:, n + 1]
        occupation[rows, model.partition.locate(x)] -= clock_weight(model.kappa, t, dt)
        mass = float(ensemble.masses[n])
        if mass <= 0:
            adjoint = adjoint * x_next / x + spot_seeds[:, n]
            continue
        if model.uncentered:
            projected = np.zeros_like(occupation)
        else:
            projected = project_occupation(occupation, x, float(ensemble.bandwidths[n])).projected
        evaluation = model.variance(t, x, occupation, projected, mass, record=False)
        d_spot, weights = model.variance_derivatives(t, x, occupation, projected, mass, evaluation)
        sigma = ensemble.vols[:, n]
        d_next_d_var = x_next * (sqrt_dt * ensemble.draws[:, n] / (2.0 * sigma) - 0.5 * dt)
        carried = adjoint * d_next_d_var
        grad += spec.parameter_vjp(t, x, nodes, carried[:, None] * weights)
        adjoint = adjoint * (x_next / x + d_next_d_var * d_spot) + spot_seeds[:, n]
    return grad
