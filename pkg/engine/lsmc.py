"""
Least Squares Monte Carlo on LOV ensembles, European Monte Carlo pricing and
a Cox-Ross-Rubinstein lattice used as a pricing oracle.
"""
from dataclasses import dataclass, field
from typing import Dict, Literal, Optional, Sequence

import numpy as np

import config
from engine.schemas import PolicyPaths, PricingError
from engine.simulator import PathEnsemble
from services.black_scholes import bs_price
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

FEATURE_COUNT = 6 + 2 * config.LSMC_BANDS  # intercept + 15 regressors


def laguerre(k: int, y: np.ndarray) -> np.ndarray:
    """Laguerre polynomial L_k(y), k = 0..3."""
    y = np.asarray(y, dtype=float)
    if k == 0:
        return np.ones_like(y)
    if k == 1:
        return 1.0 - y
    if k == 2:
        return 1.0 - 2.0 * y + 0.5 * y ** 2
    if k == 3:
        return 1.0 - 3.0 * y + 1.5 * y ** 2 - y ** 3 / 6.0
    raise PricingError(f"Laguerre degree must be 0..3, got {k}")


def build_features(
    ensemble: PathEnsemble,
    step: int,
    strike: float,
    expiry: float,
    flag: int = -1,
    rows: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Regressors at one exercise date.

    Columns: 1, Black-Scholes price at the path's current vol, L_1..L_3 of
    X / x0, total vol sigma * sqrt(T - t), band occupations O(A_1..A_5) and the
    interactions X * O(A_1..A_5). On ensembles whose paths do not depend on
    the occupation the band columns are zero, so the regression keeps the
    Markov features only.

    Args:
        ensemble: Simulated paths
        step: Grid index n of the exercise date (n < N)
        strike: K
        expiry: T
        flag: +1 call, -1 put
        rows: Optional path subset

    Returns:
        Matrix of shape (paths, FEATURE_COUNT)
    """
    select = slice(None) if rows is None else rows
    t = step * ensemble.dt
    tau = max(expiry - t, 0.0)
    spots = ensemble.spots[select, step]
    sigma = ensemble.vols[select, min(step, ensemble.steps - 1)]
    bands = ensemble.band_times[select, step, :]
    if not ensemble.path_dependent:
        bands = np.zeros_like(bands)
    moneyness = spots / ensemble.x0
    columns = [
        np.ones_like(spots),
        np.asarray(bs_price(spots, strike, tau, sigma, ensemble.rate, ensemble.dividend_yield, flag)),
        laguerre(1, moneyness),
        laguerre(2, moneyness),
        laguerre(3, moneyness),
        sigma * np.sqrt(tau),
    ]
    return np.column_stack(columns + [bands, spots[:, None] * bands])


@dataclass(eq=False)
class ExercisePolicy:
    """
    Regression coefficients per exercise date (None where the regression was skipped).

    A path stops at the first date where it is in the money and intrinsic
    value reaches the fitted continuation; otherwise it runs to expiry.
    """
    dates: np.ndarray
    strike: float
    expiry: float
    flag: int = -1
    coefficients: Dict[int, Optional[np.ndarray]] = field(default_factory=dict)
    itm_only: bool = True

    @property
    def skipped(self) -> int:
        return sum(1 for c in self.coefficients.values() if c is None)

    def stopping_steps(self, ensemble: PathEnsemble) -> np.ndarray:
        """Grid index at which each path of ``ensemble`` exercises under this policy."""
        last = int(self.dates[-1])
        stopping = np.full(ensemble.paths, last, dtype=int)
        alive = np.ones(ensemble.paths, dtype=bool)
        for n in self.dates[:-1]:
            coef = self.coefficients.get(int(n))
            if coef is None:
                continue
            intrinsic = np.maximum(self.flag * (ensemble.spots[:, n] - self.strike), 0.0)
            fitted = build_features(ensemble, int(n), self.strike, self.expiry, self.flag) @ coef
            exercise = alive & (intrinsic > 0) & (intrinsic >= fitted)
            stopping[exercise] = n
            alive &= ~exercise
        return stopping


@dataclass(eq=False)
class AmericanPrice:
    """
    LSMC estimate with the stopping rule that produced it.

    ``policy_paths`` records where the regressions were fitted. Fitting and
    pricing on the same paths ("in_sample") lets the rule see each path's
    future and biases the price high; fitting on separate paths ("split" or
    "independent") gives a feasible rule and a low-biased price.
    """
    price: float
    std_error: float
    policy: ExercisePolicy
    stopping_steps: np.ndarray  # (J,) grid index of exercise, expiry step when never exercised early
    discounted_payoffs: np.ndarray  # (J,)
    pricing_rows: np.ndarray  # paths that enter the estimate
    policy_paths: PolicyPaths = "in_sample"
    lsmc_price: float = 0.0  # continuation estimate before the comparison with exercise at t = 0
    exercise_now: bool = False  # intrinsic value at t = 0 beats the continuation estimate

    @property
    def high_biased(self) -> bool:
        return self.policy_paths == "in_sample"


def antithetic_std_error(values: np.ndarray, rows: Optional[np.ndarray] = None) -> float:
    """
    Standard error of the mean from antithetic pair averages.

    Pairs are (j, j + J/2); with ``rows`` only pairs fully inside the subset count.
    """
    values = np.asarray(values, dtype=float)
    half = values.size // 2
    first = np.arange(half)
    if rows is not None:
        keep = np.zeros(values.size, dtype=bool)
        keep[rows] = True
        first = first[keep[first] & keep[first + half]]
    if first.size < 2:
        return 0.0
    pair_means = 0.5 * (values[first] + values[first + half])
    return float(np.std(pair_means, ddof=1) / np.sqrt(first.size))


def exercise_steps_for(ensemble: PathEnsemble, expiry: float, every: int = 1) -> np.ndarray:
    """Grid indices of exercise dates: every k-th step after t = 0, always including expiry."""
    last = ensemble.step_index(expiry)
    if last < 1:
        raise PricingError(f"expiry {expiry} is shorter than one simulation step")
    steps = list(range(every, last + 1, every))
    if not steps or steps[-1] != last:
        steps.append(last)
    return np.array(steps, dtype=int)


def _split_rows(paths: int):
    pairs = paths // 2
    if pairs < 2:
        raise PricingError("two-pass pricing needs at least 2 antithetic pairs")
    fit_pairs = np.arange(pairs // 2)
    price_pairs = np.arange(pairs // 2, pairs)
    fit = np.concatenate([fit_pairs, fit_pairs + pairs])
    price = np.concatenate([price_pairs, price_pairs + pairs])
    return fit, price


def fit_exercise_policy(
    ensemble: PathEnsemble,
    strike: float,
    expiry: float,
    dates: np.ndarray,
    flag: int = -1,
    itm_only: bool = True,
    rows: Optional[np.ndarray] = None,
) -> ExercisePolicy:
    """
    Backward induction of the Longstaff-Schwartz regressions.

    Working backward over the exercise dates, discounted realised cash flows
    are regressed on the FEATURE_COUNT features over in-the-money paths; a path
    exercises when intrinsic >= fitted continuation (ties exercise). Dates with
    fewer in-the-money paths than regressors skip the regression and continue
    everywhere. Columns are scaled before an SVD least-squares solve with
    relative rank tolerance 1e-10.

    Args:
        ensemble: Regression paths
        strike: K
        expiry: T
        dates: Exercise grid indices, ending at the expiry step
        flag: +1 call, -1 put
        itm_only: Restrict regressions to in-the-money paths
        rows: Optional subset of ``ensemble`` to regress on

    Returns:
        ExercisePolicy
    """
    paths = ensemble.paths
    fit_mask = np.ones(paths, dtype=bool)
    if rows is not None:
        fit_mask[:] = False
        fit_mask[rows] = True

    last = int(dates[-1])
    r, dt = ensemble.rate, ensemble.dt
    cash = np.maximum(flag * (ensemble.spots[:, last] - strike), 0.0)
    stopping = np.full(paths, last, dtype=int)
    policy = ExercisePolicy(dates=dates, strike=strike, expiry=expiry, flag=flag, itm_only=itm_only)

    for n in dates[-2::-1]:
        intrinsic = np.maximum(flag * (ensemble.spots[:, n] - strike), 0.0)
        candidates = intrinsic > 0
        regress = (candidates if itm_only else np.ones(paths, dtype=bool)) & fit_mask
        if np.count_nonzero(regress) < FEATURE_COUNT:
            policy.coefficients[int(n)] = None
            continue
        continuation = cash * np.exp(-r * (stopping - n) * dt)
        features = build_features(ensemble, int(n), strike, expiry, flag)
        scale = np.max(np.abs(features[regress]), axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        coef, *_ = np.linalg.lstsq(
            features[regress] / scale, continuation[regress], rcond=config.LSMC_RANK_TOLERANCE
        )
        coef = coef / scale
        policy.coefficients[int(n)] = coef
        exercise = candidates & (intrinsic >= features @ coef)
        cash = np.where(exercise, intrinsic, cash)
        stopping = np.where(exercise, n, stopping)

    if policy.skipped:
        logger.debug(f"LSMC skipped regressions {format_fields(K=strike, T=expiry, dates=policy.skipped)}")
    return policy


def price_american(
    ensemble: PathEnsemble,
    strike: float,
    expiry: float,
    flag: int = -1,
    exercise_steps: Optional[Sequence[int]] = None,
    itm_only: bool = True,
    policy_paths: PolicyPaths = "in_sample",
    policy_ensemble: Optional[PathEnsemble] = None,
) -> AmericanPrice:
    """
    Longstaff-Schwartz price of an American option on a simulated ensemble.

    The exercise policy is fitted by ``fit_exercise_policy`` and then applied
    forward to the pricing paths. The mean discounted cash flow is finally
    compared with exercise at t = 0: when the intrinsic value of x0 is at
    least the estimate, the option is exercised immediately and priced at
    intrinsic with zero standard error.

    Args:
        ensemble: Simulated pricing paths
        strike: K > 0
        expiry: T <= ensemble horizon
        flag: +1 call, -1 put
        exercise_steps: Grid indices of exercise dates (default: every step after 0)
        itm_only: Restrict regressions to in-the-money paths
        policy_paths: "in_sample" fits and prices on every path; "split" fits
            on the first half of the antithetic pairs and prices on the rest;
            "independent" fits on ``policy_ensemble`` and prices on every path
        policy_ensemble: Regression paths on the same grid, required for "independent"

    Returns:
        AmericanPrice

    Raises:
        PricingError: On an invalid strike, expiry, exercise schedule or policy ensemble
    """
    if strike <= 0:
        raise PricingError(f"strike must be positive, got {strike}")
    if expiry > ensemble.horizon + 1e-12:
        raise PricingError(f"expiry {expiry} beyond simulated horizon {ensemble.horizon}")
    last = ensemble.step_index(expiry)
    dates = exercise_steps_for(ensemble, expiry) if exercise_steps is None else np.unique(np.asarray(exercise_steps, dtype=int))
    if dates.size == 0 or dates[-1] != last or dates[0] < 1:
        raise PricingError(f"exercise dates must lie in 1..{last} and include expiry step {last}")

    price_rows = np.arange(ensemble.paths)
    if policy_paths == "independent":
        if policy_ensemble is None:
            raise PricingError("independent exercise policy needs a policy ensemble")
        if abs(policy_ensemble.dt - ensemble.dt) > 1e-12 or policy_ensemble.steps < last:
            raise PricingError("policy ensemble must share the pricing grid up to expiry")
        policy = fit_exercise_policy(policy_ensemble, strike, expiry, dates, flag, itm_only)
    elif policy_paths == "split":
        fit_rows, price_rows = _split_rows(ensemble.paths)
        policy = fit_exercise_policy(ensemble, strike, expiry, dates, flag, itm_only, fit_rows)
    elif policy_paths == "in_sample":
        policy = fit_exercise_policy(ensemble, strike, expiry, dates, flag, itm_only)
    else:
        raise PricingError(f"unknown policy paths {policy_paths!r}")

    stopping = policy.stopping_steps(ensemble)
    cash = np.maximum(flag * (ensemble.spots[np.arange(ensemble.paths), stopping] - strike), 0.0)
    discounted = cash * np.exp(-ensemble.rate * stopping * ensemble.dt)
    estimate = float(np.mean(discounted[price_rows]))
    std_error = antithetic_std_error(discounted, price_rows if policy_paths == "split" else None)

    immediate = max(flag * (ensemble.x0 - strike), 0.0)
    exercise_now = immediate > 0 and immediate >= estimate
    if exercise_now:
        logger.debug(f"LSMC exercises at t = 0 {format_fields(K=strike, T=expiry, intrinsic=immediate, continuation=estimate)}")
        stopping = np.zeros(ensemble.paths, dtype=int)
        discounted = np.full(ensemble.paths, immediate)
    return AmericanPrice(
        price=immediate if exercise_now else estimate,
        std_error=0.0 if exercise_now else std_error,
        policy=policy,
        stopping_steps=stopping,
        discounted_payoffs=discounted,
        pricing_rows=price_rows,
        policy_paths=policy_paths,
        lsmc_price=estimate,
        exercise_now=exercise_now,
    )


def price_american_put(
    ensemble: PathEnsemble,
    strike: float,
    expiry: float,
    exercise_steps: Optional[Sequence[int]] = None,
    itm_only: bool = True,
    policy_paths: PolicyPaths = "in_sample",
    policy_ensemble: Optional[PathEnsemble] = None,
) -> AmericanPrice:
    """American put via ``price_american``."""
    return price_american(ensemble, strike, expiry, -1, exercise_steps, itm_only, policy_paths, policy_ensemble)


def price_european(ensemble: PathEnsemble, strike: float, expiry: float, flag: int = 1):
    """
    Discounted mean payoff at expiry with the antithetic standard error.

    Returns:
        (price, std_error)
    """
    if strike < 0:
        raise PricingError(f"strike must be >= 0, got {strike}")
    if expiry > ensemble.horizon + 1e-12:
        raise PricingError(f"expiry {expiry} beyond simulated horizon {ensemble.horizon}")
    n = ensemble.step_index(expiry)
    payoff = np.maximum(flag * (ensemble.spots[:, n] - strike), 0.0) * np.exp(-ensemble.rate * n * ensemble.dt)
    return float(np.mean(payoff)), antithetic_std_error(payoff)


def payoff_spot_seeds(result: AmericanPrice, ensemble: PathEnsemble, strike: float, flag: int = -1) -> np.ndarray:
    """
    d price / d X_{t_n} with the stopping rule frozen, shape (J, N + 1).

    Only the spot at each path's own stopping step carries a derivative; an
    option exercised at t = 0 has none.
    """
    seeds = np.zeros_like(ensemble.spots)
    if result.exercise_now:
        return seeds
    rows = result.pricing_rows
    steps = result.stopping_steps[rows]
    spots = ensemble.spots[rows, steps]
    live = flag * (spots - strike) > 0
    discount = np.exp(-ensemble.rate * steps * ensemble.dt)
    seeds[rows, steps] = np.where(live, flag * discount, 0.0) / rows.size
    return seeds


def binomial_price(
    x0: float,
    strike: float,
    expiry: float,
    sigma: float,
    rate: float = 0.0,
    div_yield: float = 0.0,
    flag: int = -1,
    exercise: Literal["E", "A"] = "E",
    steps: int = 500,
) -> float:
    """
    Cox-Ross-Rubinstein lattice price with continuous compounding.

    With sigma = 0 the lattice collapses onto the forward and the price is the
    discounted intrinsic value of the forward (maximised over the grid dates
    for American exercise).

    Raises:
        PricingError: If steps < 1 or the risk-neutral probability leaves [0, 1]
    """
    if steps < 1:
        raise PricingError(f"lattice needs at least one step, got {steps}")
    dt = expiry / steps
    if sigma <= 0:
        times = np.arange(steps + 1) * dt
        values = np.exp(-rate * times) * np.maximum(flag * (x0 * np.exp((rate - div_yield) * times) - strike), 0.0)
        return float(values[-1] if exercise == "E" else np.max(values))

    up = np.exp(sigma * np.sqrt(dt))
    down = 1.0 / up
    prob = (np.exp((rate - div_yield) * dt) - down) / (up - down)
    if not 0.0 <= prob <= 1.0:
        raise PricingError(f"risk-neutral probability {prob:.6g} outside [0, 1]; refine the lattice")
    discount = np.exp(-rate * dt)

    j = np.arange(steps + 1)
    values = np.maximum(flag * (x0 * up ** j * down ** (steps - j) - strike), 0.0)
    for i in range(steps - 1, -1, -1):
        values = discount * (prob * values[1:] + (1.0 - prob) * values[:-1])
        if exercise == "A":
            j = np.arange(i + 1)
            intrinsic = np.maximum(flag * (x0 * up ** j * down ** (i - j) - strike), 0.0)
            values = np.maximum(values, intrinsic)
    return float(values[0])
