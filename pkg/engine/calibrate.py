"""
Calibration of the sensitivity function to American put quotes.

Each epoch simulates fresh paths to the longest expiry, prices the puts by
LSMC, evaluates the Vega-weighted RMSE and takes one Adam step along the
gradient (frozen-exercise pathwise or common-random-number finite
differences). Training stops once a trailing window of losses sits below the
bid/ask threshold and has stabilised.
"""
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from engine.lov_model import LovModel
from engine.lsmc import exercise_steps_for, payoff_spot_seeds, price_american
from engine.schemas import (
    CalibrationConfig,
    CalibrationError,
    CalibrationReport,
    MarketEnvironment,
    OptionQuote,
    PolicyPaths,
    SimConfig,
)
from engine.sensitivity import AdamState, Neural, SensitivitySpec, adam_step, save_checkpoint
from engine.simulator import PathEnsemble, adjoint_sweep, simulate_lov, simulate_policy_ensemble
from utils.io_utils import ensure_dir, write_json
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

HISTORY_COLUMNS = ["epoch", "loss", "alpha", "J"]


def _arrays(prices: Sequence[float], quotes: Sequence[OptionQuote]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (len(quotes),):
        raise CalibrationError(f"{prices.size} prices for {len(quotes)} instruments")
    weights = np.array([q.weight for q in quotes])
    mids = np.array([q.mid for q in quotes])
    return prices, weights, mids


def loss(prices: Sequence[float], quotes: Sequence[OptionQuote]) -> float:
    """Weighted RMSE (1/I sum |w_i (p_i - mid_i)|^2)^(1/2)."""
    if not quotes:
        raise CalibrationError("empty calibration set")
    prices, weights, mids = _arrays(prices, quotes)
    return float(np.sqrt(np.mean((weights * (prices - mids)) ** 2)))


def threshold_alpha(quotes: Sequence[OptionQuote]) -> float:
    """
    Loss reached when every model price sits on its bid (or ask).

    alpha = 1/2 (1/I sum |w_i (ask_i - bid_i)|^2)^(1/2); with inverse-spread
    weights this no longer depends on the spreads.
    """
    if not quotes:
        raise CalibrationError("empty calibration set")
    weights = np.array([q.weight for q in quotes])
    spreads = np.array([q.spread for q in quotes])
    return float(0.5 * np.sqrt(np.mean((weights * spreads) ** 2)))


def loss_price_gradient(prices: Sequence[float], quotes: Sequence[OptionQuote]) -> np.ndarray:
    """dL/dp_i = w_i^2 (p_i - mid_i) / (I L); zero vector at a perfect fit."""
    prices, weights, mids = _arrays(prices, quotes)
    value = loss(prices, quotes)
    if value == 0.0:
        return np.zeros_like(prices)
    return weights ** 2 * (prices - mids) / (len(quotes) * value)


def pairs_for_epoch(schedule: Sequence[Tuple[int, int]], epoch: int) -> int:
    """Antithetic pair count in force at the given epoch."""
    pairs = schedule[0][1]
    for start, count in schedule:
        if epoch >= start:
            pairs = count
    return int(pairs)


def epoch_seed(seed: int, epoch: int) -> int:
    """Independent simulation seed per epoch, derived from (seed, epoch)."""
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def stopping_rule_met(losses: Sequence[float], alpha: float, window: int, range_fraction: float) -> bool:
    """All of the last ``window`` losses below alpha, spread below range_fraction * alpha."""
    if len(losses) < window:
        return False
    recent = np.asarray(losses[-window:], dtype=float)
    return bool(np.all(recent < alpha) and (recent.max() - recent.min()) < range_fraction * alpha)


def batch_steps(horizon: float, steps_per_year: int) -> int:
    return max(1, math.ceil(horizon * steps_per_year - 1e-9))


def batch_sim_config(
    horizon: float,
    steps_per_year: int,
    pairs: int,
    seed: int,
    bandwidth_multiplier: float,
) -> SimConfig:
    """Grid of a calibration batch: ``steps_per_year`` resolution up to ``horizon``, 2 * pairs paths."""
    return SimConfig(
        horizon=horizon,
        steps=batch_steps(horizon, steps_per_year),
        paths=2 * pairs,
        seed=seed,
        bandwidth_multiplier=bandwidth_multiplier,
    )


@dataclass
class CalibrationProblem:
    """American put quotes and the model template they are fitted with."""
    quotes: List[OptionQuote]
    env: MarketEnvironment
    model: LovModel
    steps_per_year: int
    bandwidth_multiplier: float
    exercise_every: int = 1
    itm_only: bool = True
    workers: int = 1
    policy_paths: PolicyPaths = "independent"

    def __post_init__(self) -> None:
        self.quotes = [q for q in self.quotes if q.is_american and not q.is_call]
        if not self.quotes:
            raise CalibrationError("empty calibration set: no American puts with positive weight")
        if any(q.weight <= 0 for q in self.quotes):
            raise CalibrationError("every calibration quote needs a positive weight")

    @property
    def horizon(self) -> float:
        return max(q.expiry for q in self.quotes)

    @property
    def steps(self) -> int:
        return batch_steps(self.horizon, self.steps_per_year)

    def sim_config(self, pairs: int, seed: int) -> SimConfig:
        return batch_sim_config(self.horizon, self.steps_per_year, pairs, seed, self.bandwidth_multiplier)


@dataclass(eq=False)
class EpochEvaluation:
    """Prices, loss and (optionally) gradient at one parameter vector."""
    prices: np.ndarray
    std_errors: np.ndarray
    loss: float
    gradient: Optional[np.ndarray] = None
    ensemble: Optional[PathEnsemble] = None


def price_quotes(
    problem: CalibrationProblem,
    model: LovModel,
    pairs: int,
    seed: int,
    keep_results: bool = False,
):
    """
    Simulate once to the longest expiry and LSMC-price every calibration put.

    With independent policy paths a second ensemble, seeded from ``seed``,
    carries the exercise regressions.
    """
    sim = problem.sim_config(pairs, seed)
    ensemble = simulate_lov(sim, problem.env, model, workers=problem.workers)
    policy_ensemble = None
    if problem.policy_paths == "independent":
        policy_ensemble = simulate_policy_ensemble(sim, problem.env, model, workers=problem.workers)
    results = []
    for q in problem.quotes:
        dates = exercise_steps_for(ensemble, q.expiry, problem.exercise_every)
        results.append(
            price_american(ensemble, q.strike, q.expiry, -1, dates, problem.itm_only, problem.policy_paths, policy_ensemble)
        )
    prices = np.array([r.price for r in results])
    errors = np.array([r.std_error for r in results])
    return prices, errors, ensemble, (results if keep_results else None)


def loss_and_gradient(
    problem: CalibrationProblem,
    spec: SensitivitySpec,
    pairs: int,
    seed: int,
    method: str = "pathwise",
    fd_step: float = 1e-4,
) -> EpochEvaluation:
    """
    Loss and parameter gradient at ``spec`` for one seeded batch.

    pathwise: exercise times and projection weights of this batch are frozen
    and dL/dtheta is accumulated backward through the X recursion.
    finite_difference: central differences per parameter with the same seed
    (common random numbers); step fd_step * max(1, |theta_k|).

    Raises:
        CalibrationError: On an unknown method
    """
    model = problem.model.with_spec(spec)
    prices, errors, ensemble, results = price_quotes(problem, model, pairs, seed, keep_results=True)
    value = loss(prices, problem.quotes)
    theta = spec.parameters

    if method == "pathwise":
        dl_dp = loss_price_gradient(prices, problem.quotes)
        if not np.any(dl_dp):
            gradient = np.zeros(theta.size)
        else:
            seeds = np.zeros_like(ensemble.spots)
            for weight, result, q in zip(dl_dp, results, problem.quotes):
                if weight:
                    seeds += weight * payoff_spot_seeds(result, ensemble, q.strike, -1)
            gradient = adjoint_sweep(model, ensemble, seeds)
    elif method == "finite_difference":
        gradient = np.zeros(theta.size)
        for k in range(theta.size):
            step = fd_step * max(1.0, abs(theta[k]))
            bumped = []
            for sign in (1.0, -1.0):
                shifted = theta.copy()
                shifted[k] += sign * step
                bumped_model = problem.model.with_spec(spec.with_parameters(shifted))
                bumped.append(loss(price_quotes(problem, bumped_model, pairs, seed)[0], problem.quotes))
            gradient[k] = (bumped[0] - bumped[1]) / (2.0 * step)
    else:
        raise CalibrationError(f"unknown gradient method {method!r}")

    return EpochEvaluation(prices=prices, std_errors=errors, loss=value, gradient=gradient, ensemble=ensemble)


@dataclass(eq=False)
class CalibrationResult:
    """Calibrated sensitivity, loss history and final report."""
    spec: SensitivitySpec
    history: pd.DataFrame
    report: CalibrationReport
    final_prices: np.ndarray = field(default_factory=lambda: np.zeros(0))
    final_std_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _write_checkpoint(out_dir: Path, spec: SensitivitySpec, epoch: int) -> Path:
    directory = ensure_dir(out_dir / "checkpoints")
    if isinstance(spec, Neural):
        return save_checkpoint(directory / f"theta_epoch_{epoch:05d}.csv", spec.params)
    return write_json(
        directory / f"theta_epoch_{epoch:05d}.json",
        {"variant": spec.name, "parameters": [float(v) for v in spec.parameters]},
    )


def calibrate(
    problem: CalibrationProblem,
    spec: SensitivitySpec,
    settings: CalibrationConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> CalibrationResult:
    """
    Fit the sensitivity parameters to the American put quotes.

    Args:
        problem: Quotes (with weights), environment and model template
        spec: Initial sensitivity (its parameters are trained)
        settings: Optimiser, batch schedule, stopping rule and seeds
        out_dir: Directory for theta checkpoints (none written when omitted)

    Returns:
        CalibrationResult; the spec is the last iterate when converged,
        otherwise the lowest-loss iterate with ``converged`` False

    Raises:
        CalibrationError: If the spec has no trainable parameters
    """
    theta = spec.parameters.astype(float).copy()
    if theta.size == 0:
        raise CalibrationError(f"sensitivity {spec.name!r} has no parameters to calibrate")
    alpha = threshold_alpha(problem.quotes)
    state = AdamState.zeros(
        theta.size,
        learning_rate=settings.learning_rate,
        beta1=settings.beta1,
        beta2=settings.beta2,
        epsilon=settings.adam_epsilon,
    )
    out_path = Path(out_dir) if out_dir is not None else None
    logger.info(
        f"Calibration start {format_fields(instruments=len(problem.quotes), parameters=theta.size, alpha=alpha, method=settings.gradient_method, steps=problem.steps)}"
    )

    started = time.perf_counter()
    rows = []
    losses: List[float] = []
    best = (np.inf, theta.copy(), -1)
    converged = False
    current = spec

    for epoch in range(settings.max_epochs):
        pairs = pairs_for_epoch(settings.batch_schedule, epoch)
        evaluation = loss_and_gradient(
            problem, current, pairs, epoch_seed(settings.seed, epoch), settings.gradient_method, settings.fd_step
        )
        losses.append(evaluation.loss)
        rows.append({"epoch": epoch, "loss": evaluation.loss, "alpha": alpha, "J": 2 * pairs})
        logger.info(f"epoch {format_fields(epoch=epoch, loss=evaluation.loss, alpha=alpha, J=2 * pairs)}")
        if evaluation.loss < best[0]:
            best = (evaluation.loss, theta.copy(), epoch)

        if stopping_rule_met(losses, alpha, settings.stopping_window, settings.stopping_range_fraction):
            converged = True
            logger.info(f"Stopping rule met at epoch {epoch}")
            break

        gradient = evaluation.gradient
        if gradient is None or not np.all(np.isfinite(gradient)):
            logger.warning(f"non-finite gradient at epoch {epoch}; parameters kept")
        else:
            state, theta = adam_step(state, theta, gradient)
            current = spec.with_parameters(theta)

        if out_path is not None and (epoch + 1) % settings.checkpoint_every == 0:
            _write_checkpoint(out_path, current, epoch + 1)

    if not converged:
        logger.warning(f"Epoch limit {settings.max_epochs} reached without convergence; keeping best epoch {best[2]}")
        theta = best[1]
    final_spec = spec.with_parameters(theta)
    if out_path is not None:
        _write_checkpoint(out_path, final_spec, len(losses))

    final_model = problem.model.with_spec(final_spec)
    prices, errors, _, _ = price_quotes(problem, final_model, settings.final_pairs, settings.holdout_seed)
    final_loss = loss(prices, problem.quotes)
    in_band = [q.bid <= p <= q.ask for p, q in zip(prices, problem.quotes)]
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    report: CalibrationReport = {
        "converged": converged,
        "epochs": len(losses),
        "best_epoch": int(best[2]),
        "best_loss": float(best[0]),
        "final_loss": final_loss,
        "alpha": alpha,
        "instruments": len(problem.quotes),
        "in_band_fraction": float(np.mean(in_band)),
        "wall_time_seconds": time.perf_counter() - started,
        "gradient_method": settings.gradient_method,
        "policy_paths": problem.policy_paths,
        "loss_history": [float(v) for v in losses],
        "final_prices": [float(p) for p in prices],
    }
    logger.info(
        f"Calibration done {format_fields(converged=converged, epochs=len(losses), final_loss=final_loss, alpha=alpha)}"
    )
    return CalibrationResult(
        spec=final_spec,
        history=history,
        report=report,
        final_prices=prices,
        final_std_errors=errors,
    )
