"""Step-logged orchestration behind each CLI command."""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from engine.calibrate import CalibrationProblem, CalibrationResult, batch_sim_config, calibrate
from engine.lov_model import LovModel, check_positivity_bound
from engine.lsmc import exercise_steps_for, price_american, price_european
from engine.occupation import build_partition
from engine.reporting import (
    emit_plot_data,
    instrument_reports,
    price_records,
    write_instrument_reports,
    write_prices,
)
from engine.schemas import (
    CalibrationConfig,
    CalibrationError,
    MarketEnvironment,
    ModelConfig,
    OptionQuote,
    PolicyPaths,
    PricingError,
    SimulateConfig,
    SimulationSummary,
)
from engine.sensitivity import Neural, build_sensitivity, save_checkpoint
from engine.simulator import PathEnsemble, simulate_lov, simulate_policy_ensemble
from services.localvol import (
    ImpliedVolSurface,
    LocalVolSurface,
    atm_forward_vol,
    dupire_from_implied,
    write_surface_csv,
)
from services.market_data import calibration_weights, load_chain, with_weights
from utils.io_utils import ensure_dir, write_json
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]


def build_model(
    model_config: ModelConfig,
    surface: LocalVolSurface,
    env: MarketEnvironment,
    horizon: float,
) -> LovModel:
    """Partition, sensitivity and LOV model for a run to ``horizon``."""
    sigma_ref = model_config.partition.sigma_ref or atm_forward_vol(surface, env, horizon)
    partition = build_partition(
        env.spot,
        sigma_ref,
        horizon,
        model_config.partition.corridors,
        model_config.partition.band_multiplier,
    )
    spec = build_sensitivity(
        model_config.spec,
        surface=surface,
        partition=partition,
        horizon=horizon,
        x0=env.spot,
        multiplicative=model_config.mode == "multiplicative",
    )
    logger.info(
        f"Model {format_fields(mode=model_config.mode, kappa=model_config.kappa, M=partition.size, spec=spec.name, sigma_ref=sigma_ref)}"
    )
    return LovModel.from_config(model_config, surface, partition, spec)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _write_paths(out_dir: Path, ensemble: PathEnsemble, record_paths: bool) -> None:
    terminal = pd.DataFrame({"path_id": np.arange(ensemble.paths), "X_T": ensemble.terminal})
    terminal.to_csv(out_dir / "terminal.csv", index=False, float_format="%.17g", lineterminator="\n")
    if not record_paths:
        return
    steps = ensemble.steps
    frame = pd.DataFrame({
        "path_id": np.repeat(np.arange(ensemble.paths), steps + 1),
        "step": np.tile(np.arange(steps + 1), ensemble.paths),
        "t": np.tile(ensemble.times, ensemble.paths),
        "X": ensemble.spots.reshape(-1),
        # sigma used over [t_n, t_{n+1}); undefined at the last grid point
        "sigma": np.concatenate([ensemble.vols, np.full((ensemble.paths, 1), np.nan)], axis=1).reshape(-1),
    })
    frame.to_csv(out_dir / "paths.csv", index=False, float_format="%.17g", lineterminator="\n")


def run_simulation(
    run_config: SimulateConfig,
    surface: LocalVolSurface,
    out_dir: PathLike,
    workers: int = 1,
) -> Tuple[PathEnsemble, SimulationSummary]:
    """
    Simulate the configured LOV model and write paths and a summary.

    Outputs: terminal.csv (path_id,X_T), paths.csv when record_paths is set
    (path_id,step,t,X,sigma), summary.json.
    """
    out_dir = ensure_dir(out_dir)
    sim, env = run_config.simulation, run_config.environment

    logger.info("Step 1: Building model...")
    model = build_model(run_config.model, surface, env, sim.horizon)
    if not model.spec.is_zero:
        check_positivity_bound(model, sim.horizon)

    logger.info(f"Step 2: Simulating {sim.paths} paths over {sim.steps} steps...")
    ensemble = simulate_lov(sim, env, model, workers=workers)

    logger.info("Step 3: Writing outputs...")
    _write_paths(out_dir, ensemble, sim.record_paths)
    summary: SimulationSummary = {
        "paths": ensemble.paths,
        "steps": ensemble.steps,
        "horizon": ensemble.horizon,
        "clamp_events": ensemble.clamp_events,
        "mass": ensemble.final_mass,
        "mass_residual": ensemble.mass_residual(),
        "runtime_seconds": ensemble.runtime_seconds,
        "mean_terminal": float(np.mean(ensemble.terminal)),
    }
    write_json(out_dir / "summary.json", summary)
    logger.info(f"Simulation summary {format_fields(**summary)}")
    return ensemble, summary


# ---------------------------------------------------------------------------
# price
# ---------------------------------------------------------------------------

def price_quotes_on(
    ensemble: PathEnsemble,
    quotes: Sequence[OptionQuote],
    exercise_every: int = 1,
    itm_only: bool = True,
    policy_paths: PolicyPaths = "in_sample",
    policy_ensemble: Optional[PathEnsemble] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Prices and standard errors of every quote on one ensemble (LSMC or European)."""
    prices, errors = [], []
    for q in quotes:
        if q.expiry > ensemble.horizon + 1e-12:
            raise PricingError(f"{q.label} expires after the simulated horizon {ensemble.horizon:g}")
        if q.is_american:
            dates = exercise_steps_for(ensemble, q.expiry, exercise_every)
            result = price_american(ensemble, q.strike, q.expiry, q.flag, dates, itm_only, policy_paths, policy_ensemble)
            price, error = result.price, result.std_error
        else:
            price, error = price_european(ensemble, q.strike, q.expiry, q.flag)
        prices.append(price)
        errors.append(error)
    return np.array(prices), np.array(errors)


def run_pricing(
    run_config: SimulateConfig,
    surface: LocalVolSurface,
    chain_path: PathLike,
    out_path: PathLike,
    workers: int = 1,
) -> pd.DataFrame:
    """Simulate once and price every instrument of a chain; CSV strike,expiry,flag,exercise,price,std_error."""
    sim, env = run_config.simulation, run_config.environment

    logger.info("Step 1: Loading instruments...")
    quotes = load_chain(chain_path, env, max_rel_spread=1.0)
    if not quotes:
        raise PricingError(f"no instruments in {chain_path}")

    logger.info("Step 2: Simulating ensemble...")
    model = build_model(run_config.model, surface, env, sim.horizon)
    ensemble = simulate_lov(sim, env, model, workers=workers)
    policy_ensemble = None
    if run_config.policy_paths == "independent":
        policy_ensemble = simulate_policy_ensemble(sim, env, model, workers=workers)

    logger.info(f"Step 3: Pricing {len(quotes)} instruments...")
    prices, errors = price_quotes_on(ensemble, quotes, policy_paths=run_config.policy_paths, policy_ensemble=policy_ensemble)
    records = price_records(quotes, prices, errors)
    write_prices(out_path, records)
    logger.info(f"Wrote {len(records)} prices to {out_path}")
    return pd.DataFrame(records)


# ---------------------------------------------------------------------------
# localvol
# ---------------------------------------------------------------------------

def run_localvol(implied: ImpliedVolSurface, env: MarketEnvironment, out_path: PathLike) -> LocalVolSurface:
    """Dupire local vols from an implied surface, written in the surface CSV layout."""
    logger.info("Step 1: Extracting local volatility...")
    local = dupire_from_implied(implied, env)
    logger.info(f"Step 2: Writing local surface ({len(local.adjusted_nodes)} adjusted nodes)...")
    write_surface_csv(out_path, local)
    return local


# ---------------------------------------------------------------------------
# calibrate / report
# ---------------------------------------------------------------------------

def load_weighted_chain(chain_path: PathLike, env: MarketEnvironment, settings: CalibrationConfig) -> List[OptionQuote]:
    quotes = load_chain(chain_path, env, settings.max_rel_spread)
    return with_weights(quotes, calibration_weights(quotes, env, settings.vega_floor))


def calibration_problem(
    quotes: Sequence[OptionQuote],
    env: MarketEnvironment,
    surface: LocalVolSurface,
    settings: CalibrationConfig,
    workers: int = 1,
) -> Tuple[CalibrationProblem, LovModel]:
    puts = [q for q in quotes if q.is_american and not q.is_call]
    if not puts:
        raise CalibrationError("empty calibration set: the chain holds no American puts")
    horizon = max(q.expiry for q in puts)
    model = build_model(settings.model, surface, env, horizon)
    problem = CalibrationProblem(
        quotes=list(puts),
        env=env,
        model=model,
        steps_per_year=settings.steps_per_year,
        bandwidth_multiplier=settings.bandwidth_multiplier,
        exercise_every=settings.exercise_every,
        itm_only=settings.itm_only,
        workers=workers,
        policy_paths=settings.policy_paths,
    )
    return problem, model


def run_calibration(
    settings: CalibrationConfig,
    env: MarketEnvironment,
    surface: LocalVolSurface,
    chain_path: PathLike,
    out_dir: PathLike,
    workers: int = 1,
) -> CalibrationResult:
    """
    Calibrate the sensitivity to the chain's American puts.

    Outputs: checkpoints/, loss_history.csv (epoch,loss,alpha,J),
    calibration_report.json and the final theta (theta.csv + sidecar for the
    network, theta.json otherwise).
    """
    out_dir = ensure_dir(out_dir)

    logger.info("Step 1: Loading quotes and weights...")
    quotes = load_weighted_chain(chain_path, env, settings)

    logger.info("Step 2: Building model...")
    problem, model = calibration_problem(quotes, env, surface, settings, workers)

    logger.info(f"Step 3: Calibrating to {len(problem.quotes)} American puts...")
    result = calibrate(problem, model.spec, settings, out_dir)

    logger.info("Step 4: Writing outputs...")
    result.history.to_csv(out_dir / "loss_history.csv", index=False, float_format="%.17g", lineterminator="\n")
    write_json(out_dir / "calibration_report.json", result.report)
    if isinstance(result.spec, Neural):
        save_checkpoint(out_dir / "theta.csv", result.spec.params)
    else:
        write_json(out_dir / "theta.json", {"variant": result.spec.name, "parameters": result.spec.parameters.tolist()})
    return result


def _held_out_pricing(
    quotes: Sequence[OptionQuote],
    env: MarketEnvironment,
    model: LovModel,
    settings: CalibrationConfig,
    horizon: float,
    workers: int,
) -> Tuple[np.ndarray, PathEnsemble]:
    """Prices of ``quotes`` on the held-out grid to ``horizon`` (the calibration's final pricing batch)."""
    sim = batch_sim_config(horizon, settings.steps_per_year, settings.final_pairs, settings.holdout_seed, settings.bandwidth_multiplier)
    ensemble = simulate_lov(sim, env, model, workers=workers)
    policy_ensemble = None
    if settings.policy_paths == "independent" and any(q.is_american for q in quotes):
        policy_ensemble = simulate_policy_ensemble(sim, env, model, workers=workers)
    prices, _ = price_quotes_on(
        ensemble, quotes, settings.exercise_every, settings.itm_only, settings.policy_paths, policy_ensemble
    )
    return prices, ensemble


def run_report(
    settings: CalibrationConfig,
    env: MarketEnvironment,
    surface: LocalVolSurface,
    chain_path: PathLike,
    out_dir: PathLike,
    slices: Sequence[Tuple[float, float]] = (),
    history_path: Optional[PathLike] = None,
    snapshot_path: int = 0,
    theta_values: Optional[Sequence[float]] = None,
    workers: int = 1,
) -> Dict[str, object]:
    """
    Price every instrument under the configured (calibrated) sensitivity.

    The model, grid, seed and exercise policy are those of the calibration's
    final pricing batch, so American put prices match the calibration report.
    Instruments expiring after the longest American put are priced on a
    second held-out ensemble that runs to the end of the chain.

    Outputs: instruments.csv (strike,expiry,flag,model_price,bid,ask,in_band),
    smile.csv, occupation_snapshot.csv, one sensitivity_slice CSV per (t, X)
    and loss_curve.csv when a loss history is supplied.
    """
    out_dir = ensure_dir(out_dir)

    logger.info("Step 1: Loading quotes...")
    quotes = load_weighted_chain(chain_path, env, settings)
    if not quotes:
        raise PricingError(f"no instruments in {chain_path}")
    puts = [q for q in quotes if q.is_american and not q.is_call]
    horizon = max(q.expiry for q in (puts or quotes))

    logger.info("Step 2: Simulating held-out ensemble...")
    model = build_model(settings.model, surface, env, horizon)
    if theta_values is not None:
        model = model.with_spec(model.spec.with_parameters(theta_values))

    logger.info(f"Step 3: Pricing {len(quotes)} instruments...")
    covered = np.array([q.expiry <= horizon + 1e-12 for q in quotes])
    prices = np.empty(len(quotes))
    covered_prices, ensemble = _held_out_pricing(
        [q for q, c in zip(quotes, covered) if c], env, model, settings, horizon, workers
    )
    prices[covered] = covered_prices
    if not covered.all():
        later = [q for q, c in zip(quotes, covered) if not c]
        longest = max(q.expiry for q in later)
        logger.info(f"Pricing {len(later)} instrument(s) past the calibration horizon {format_fields(horizon=longest)}")
        prices[~covered] = _held_out_pricing(later, env, model, settings, longest, workers)[0]
    reports = instrument_reports(quotes, prices)
    write_instrument_reports(out_dir / "instruments.csv", reports)
    in_band = float(np.mean([r["in_band"] for r in reports]))

    logger.info("Step 4: Emitting plot data...")
    emit_plot_data("smile", out_dir / "smile.csv", quotes=quotes, model_prices=prices, env=env)
    emit_plot_data("occupation_snapshot", out_dir / "occupation_snapshot.csv", ensemble=ensemble, path=snapshot_path)
    for t, spot in slices:
        emit_plot_data(
            "sensitivity_slice",
            out_dir / f"sensitivity_slice_t{t:g}_x{spot:g}.csv",
            spec=model.spec,
            t=t,
            spot=spot,
            nodes=model.partition.nodes,
        )
    if history_path is not None:
        history = pd.read_csv(history_path)
        emit_plot_data("loss_curve", out_dir / "loss_curve.csv", history=history)

    logger.info(f"Report {format_fields(instruments=len(quotes), in_band_fraction=in_band)}")
    return {"instruments": len(quotes), "in_band_fraction": in_band, "clamp_events": ensemble.clamp_events}
