"""Black-Scholes analytics: price, Vega and implied volatility."""
import math
from typing import Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr
from scipy.stats import norm

from config import (
    IV_LOWER_BOUND,
    IV_MAX_BRACKET_EXPANSIONS,
    IV_PRICE_TOLERANCE,
    IV_UPPER_BOUND,
)
from engine.schemas import ArbitrageViolationError

ArrayLike = Union[float, np.ndarray]


def _as_output(value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(value) == 0 else value


def bs_price(
    spot: ArrayLike,
    strike: ArrayLike,
    expiry: ArrayLike,
    sigma: ArrayLike,
    rate: float = 0.0,
    div_yield: float = 0.0,
    flag: int = 1,
) -> ArrayLike:
    """
    Black-Scholes price of a European option. Vectorized over array inputs.

    Degenerate inputs (expiry 0 or sigma 0) return the discounted intrinsic
    value of the forward, which is the plain intrinsic value at expiry.

    Args:
        spot: Spot price(s)
        strike: Strike(s)
        expiry: Year fraction(s) to expiry, >= 0
        sigma: Volatility per sqrt(year), >= 0
        rate: Continuously compounded rate
        div_yield: Continuous dividend yield
        flag: +1 call, -1 put

    Returns:
        Price (float for scalar inputs, ndarray otherwise)
    """
    spot, strike, expiry, sigma = np.broadcast_arrays(
        np.asarray(spot, dtype=float),
        np.asarray(strike, dtype=float),
        np.asarray(expiry, dtype=float),
        np.asarray(sigma, dtype=float),
    )
    expiry = np.maximum(expiry, 0.0)
    total_vol = sigma * np.sqrt(expiry)
    df_rate = np.exp(-rate * expiry)
    df_div = np.exp(-div_yield * expiry)
    forward_intrinsic = np.maximum(flag * (spot * df_div - strike * df_rate), 0.0)

    live = total_vol > 0
    safe_vol = np.where(live, total_vol, 1.0)
    with np.errstate(divide="ignore"):
        d1 = (np.log(spot / strike) + (rate - div_yield) * expiry) / safe_vol + 0.5 * safe_vol
    d2 = d1 - safe_vol
    price = flag * (spot * df_div * ndtr(flag * d1) - strike * df_rate * ndtr(flag * d2))
    return _as_output(np.where(live, price, forward_intrinsic))


def bs_vega(
    spot: ArrayLike,
    strike: ArrayLike,
    expiry: ArrayLike,
    sigma: ArrayLike,
    rate: float = 0.0,
    div_yield: float = 0.0,
) -> ArrayLike:
    """
    Black-Scholes Vega, dPrice/dSigma (identical for calls and puts).

    Args:
        spot: Spot price(s)
        strike: Strike(s)
        expiry: Year fraction(s), > 0
        sigma: Volatility per sqrt(year)
        rate: Continuously compounded rate
        div_yield: Continuous dividend yield

    Returns:
        Vega in price units per unit of volatility
    """
    spot, strike, expiry, sigma = np.broadcast_arrays(
        np.asarray(spot, dtype=float),
        np.asarray(strike, dtype=float),
        np.asarray(expiry, dtype=float),
        np.asarray(sigma, dtype=float),
    )
    sqrt_t = np.sqrt(np.maximum(expiry, 0.0))
    total_vol = sigma * sqrt_t
    live = total_vol > 0
    safe_vol = np.where(live, total_vol, 1.0)
    d1 = (np.log(spot / strike) + (rate - div_yield) * expiry) / safe_vol + 0.5 * safe_vol
    vega = spot * np.exp(-div_yield * expiry) * norm.pdf(d1) * sqrt_t
    return _as_output(np.where(live, vega, 0.0))


def no_arbitrage_bounds(
    spot: float,
    strike: float,
    expiry: float,
    rate: float,
    div_yield: float,
    flag: int,
) -> Tuple[float, float]:
    """Lower (sigma -> 0) and upper (sigma -> infinity) European price bounds."""
    discounted_spot = spot * math.exp(-div_yield * expiry)
    discounted_strike = strike * math.exp(-rate * expiry)
    lower = max(flag * (discounted_spot - discounted_strike), 0.0)
    upper = discounted_spot if flag == 1 else discounted_strike
    return lower, upper


def implied_vol(
    price: float,
    spot: float,
    strike: float,
    expiry: float,
    rate: float = 0.0,
    div_yield: float = 0.0,
    flag: int = 1,
) -> float:
    """
    Black-Scholes implied volatility: Brent bracketing, then Newton polish.

    A price equal to the lower bound (pure intrinsic) returns 0.0; callers
    treat that as the zero-vol flag.

    Args:
        price: Option price
        spot: Spot price
        strike: Strike
        expiry: Year fraction, > 0
        rate: Continuously compounded rate
        div_yield: Continuous dividend yield
        flag: +1 call, -1 put

    Returns:
        Implied volatility per sqrt(year)

    Raises:
        ArbitrageViolationError: If price lies outside the no-arbitrage bounds
    """
    lower, upper = no_arbitrage_bounds(spot, strike, expiry, rate, div_yield, flag)
    if price < lower - IV_PRICE_TOLERANCE or price >= upper:
        raise ArbitrageViolationError(
            f"price {price:.10g} outside no-arbitrage bounds [{lower:.10g}, {upper:.10g}) "
            f"for K={strike:g}, T={expiry:g}, flag={flag:+d}"
        )
    if price <= lower + IV_PRICE_TOLERANCE:
        return 0.0

    def objective(sigma: float) -> float:
        return bs_price(spot, strike, expiry, sigma, rate, div_yield, flag) - price

    lo, hi = IV_LOWER_BOUND, IV_UPPER_BOUND
    expansions = 0
    while objective(hi) < 0:
        if expansions >= IV_MAX_BRACKET_EXPANSIONS:
            raise ArbitrageViolationError(f"no volatility reproduces price {price:.10g} below sigma={hi:g}")
        lo, hi = hi, hi * 2.0
        expansions += 1
    if objective(lo) > 0:
        return lo

    sigma = brentq(objective, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)

    # Newton polish on the price residual
    for _ in range(3):
        residual = objective(sigma)
        if abs(residual) <= IV_PRICE_TOLERANCE * 1e-2:
            break
        vega = bs_vega(spot, strike, expiry, sigma, rate, div_yield)
        if vega < 1e-12:
            break
        candidate = sigma - residual / vega
        if not (lo <= candidate <= hi):
            break
        sigma = candidate
    return float(sigma)
