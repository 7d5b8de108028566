"""Synthetic implied surfaces and quote sets for calibration round trips."""
from typing import List, Optional, Sequence

import numpy as np

import config
from engine.lov_model import LovModel
from engine.calibrate import batch_sim_config
from engine.lsmc import exercise_steps_for, price_american
from engine.schemas import MarketDataError, MarketEnvironment, OptionQuote, PolicyPaths
from engine.simulator import simulate_lov, simulate_policy_ensemble
from services.black_scholes import bs_price, bs_vega
from services.localvol import ImpliedVolSurface, VolSurface
from services.market_data import calibration_weights, with_weights
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

# One Vega point is the price change for a one-vol-point (0.01) move.
VEGA_POINT = 0.01


def smooth_skew_surface(
    env: MarketEnvironment,
    expiries: Sequence[float],
    strikes: Sequence[float],
    atm_vol: float = 0.25,
    skew: float = -0.15,
    curvature: float = 0.10,
    vol_floor: float = 0.05,
) -> ImpliedVolSurface:
    """
    Implied vols atm_vol + skew * y + curvature * y^2 with y = ln(K / F_T).

    The smile is fixed in log-moneyness, so total variance grows with expiry.
    """
    expiries = np.asarray(expiries, dtype=float)
    strikes = np.asarray(strikes, dtype=float)
    forwards = env.spot * np.exp((env.rate - env.dividend_yield) * expiries)
    y = np.log(strikes[None, :] / forwards[:, None])
    vols = np.maximum(atm_vol + skew * y + curvature * y ** 2, vol_floor)
    return ImpliedVolSurface(time_grid=expiries, strike_grid=strikes, values=vols)


def _quote(price: float, half_spread: float, **fields) -> OptionQuote:
    bid = max(price - half_spread, 0.0)
    return OptionQuote(bid=bid, ask=bid + 2.0 * half_spread if bid == 0.0 else price + half_spread, **fields)


def synthetic_call_quotes(
    surface: VolSurface,
    env: MarketEnvironment,
    strikes: Sequence[float],
    expiries: Sequence[float],
    half_spread_vega_points: float = 2.0,
) -> List[OptionQuote]:
    """European calls at Black-Scholes prices of the surface vols, mids on the price."""
    quotes = []
    for t in expiries:
        for k in strikes:
            sigma = float(surface.at(t, k))
            price = float(bs_price(env.spot, k, t, sigma, env.rate, env.dividend_yield, 1))
            vega = float(bs_vega(env.spot, k, t, sigma, env.rate, env.dividend_yield))
            half = max(half_spread_vega_points * VEGA_POINT * vega, 1e-4)
            quotes.append(
                _quote(price, half, strike=float(k), expiry=float(t), flag=1, exercise="E", implied_vol=sigma)
            )
    return quotes


def synthetic_put_quotes(
    model: LovModel,
    env: MarketEnvironment,
    strikes: Sequence[float],
    expiries: Sequence[float],
    vega_surface: VolSurface,
    pairs: int = config.FINAL_PRICING_PAIRS,
    seed: int = config.DEFAULT_SEED,
    steps_per_year: int = config.STEPS_PER_YEAR,
    bandwidth_multiplier: float = config.BANDWIDTH_MULTIPLIER,
    half_spread_vega_points: float = 2.0,
    policy_paths: PolicyPaths = config.LSMC_POLICY_PATHS,
    workers: int = 1,
) -> List[OptionQuote]:
    """
    American puts priced by LSMC under ``model``, quoted around the model price.

    Half-spreads are ``half_spread_vega_points`` Vega points, with Vega taken
    at the vol of ``vega_surface``. All instruments share one ensemble
    simulated to the longest expiry.

    Raises:
        MarketDataError: If no strikes or expiries are given
    """
    if not strikes or not expiries:
        raise MarketDataError("synthetic quotes need at least one strike and one expiry")
    sim = batch_sim_config(max(expiries), steps_per_year, pairs, seed, bandwidth_multiplier)
    ensemble = simulate_lov(sim, env, model, workers=workers)
    policy_ensemble = None
    if policy_paths == "independent":
        policy_ensemble = simulate_policy_ensemble(sim, env, model, workers=workers)
    quotes = []
    for t in sorted(expiries):
        dates = exercise_steps_for(ensemble, t)
        for k in sorted(strikes):
            price = price_american(ensemble, k, t, -1, dates, True, policy_paths, policy_ensemble).price
            sigma = float(vega_surface.at(t, k))
            vega = float(bs_vega(env.spot, k, t, sigma, env.rate, env.dividend_yield))
            half = max(half_spread_vega_points * VEGA_POINT * vega, 1e-4)
            quotes.append(_quote(price, half, strike=float(k), expiry=float(t), flag=-1, exercise="A"))
    logger.info(f"Synthetic American puts {format_fields(count=len(quotes), J=2 * pairs, steps=sim.steps, spec=model.spec.name)}")
    return quotes


def synthetic_market(
    model: LovModel,
    env: MarketEnvironment,
    implied: VolSurface,
    strikes: Sequence[float],
    expiries: Sequence[float],
    pairs: int = config.FINAL_PRICING_PAIRS,
    seed: int = config.DEFAULT_SEED,
    steps_per_year: int = config.STEPS_PER_YEAR,
    half_spread_vega_points: float = 2.0,
    vega_floor: float = config.VEGA_FLOOR,
    workers: int = 1,
    call_strikes: Optional[Sequence[float]] = None,
) -> List[OptionQuote]:
    """European call skew plus LOV American puts, weighted for calibration."""
    calls = synthetic_call_quotes(
        implied, env, call_strikes if call_strikes is not None else strikes, expiries, half_spread_vega_points
    )
    puts = synthetic_put_quotes(
        model,
        env,
        strikes,
        expiries,
        implied,
        pairs=pairs,
        seed=seed,
        steps_per_year=steps_per_year,
        half_spread_vega_points=half_spread_vega_points,
        workers=workers,
    )
    quotes = sorted(calls + puts, key=lambda q: (q.expiry, q.strike, q.flag))
    return with_weights(quotes, calibration_weights(quotes, env, vega_floor))
