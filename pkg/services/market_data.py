"""Option-chain ingestion, market environment loading and calibration weights."""
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config import CHAIN_COLUMNS, MAX_REL_SPREAD, VEGA_FLOOR
from engine.schemas import (
    ArbitrageViolationError,
    ChainParseError,
    CrossedMarketError,
    MarketDataError,
    MarketEnvironment,
    NegativePriceError,
    OptionQuote,
    ZeroSpreadError,
)
from services.black_scholes import bs_vega, implied_vol
from utils.io_utils import read_json
from utils.logging_utils import get_logger

logger = get_logger(__name__)

_FLAGS = {"C": 1, "P": -1}
_EXERCISES = {"E", "A"}


def load_environment(path: Union[str, Path]) -> MarketEnvironment:
    """
    Load the market environment JSON ``{spot, rate, dividend_yield, valuation_date}``.

    Args:
        path: JSON file path

    Returns:
        MarketEnvironment

    Raises:
        FileNotFoundError: If the file is missing
        pydantic.ValidationError: If a field violates the schema
    """
    return MarketEnvironment.model_validate(read_json(path))


def normalize_row(row: Dict[str, Any], line: int) -> Dict[str, Any]:
    """
    Convert one raw CSV row into validated quote fields.

    Args:
        row: Mapping with the chain columns as strings
        line: 1-based file line number, used in error messages

    Returns:
        Dictionary of OptionQuote fields

    Raises:
        ChainParseError: If a field cannot be parsed
        NegativePriceError: If bid or ask is negative
        CrossedMarketError: If bid > ask
    """
    try:
        expiry = float(row["expiry_years"])
        strike = float(row["strike"])
        bid = float(row["bid"])
        ask = float(row["ask"])
    except (TypeError, ValueError) as e:
        raise ChainParseError(line, f"non-numeric field ({str(e)})")

    flag_text = str(row["flag"]).strip().upper()
    if flag_text not in _FLAGS:
        raise ChainParseError(line, f"flag must be C or P, got {row['flag']!r}")
    exercise = str(row["exercise"]).strip().upper()
    if exercise not in _EXERCISES:
        raise ChainParseError(line, f"exercise must be E or A, got {row['exercise']!r}")
    if not all(math.isfinite(v) for v in (expiry, strike, bid, ask)):
        raise ChainParseError(line, "non-finite numeric field")
    if strike <= 0 or expiry <= 0:
        raise ChainParseError(line, f"strike and expiry must be positive (K={strike}, T={expiry})")
    if bid < 0 or ask < 0:
        raise NegativePriceError(f"line {line}: negative price (bid={bid}, ask={ask})")
    if bid > ask:
        raise CrossedMarketError(f"line {line}: crossed market (bid={bid} > ask={ask})")

    return {
        "expiry": expiry,
        "strike": strike,
        "flag": _FLAGS[flag_text],
        "exercise": exercise,
        "bid": bid,
        "ask": ask,
    }


def _with_implied_vol(quote: OptionQuote, env: MarketEnvironment) -> OptionQuote:
    # American quotes get the European-equivalent vol only as a Vega fallback
    try:
        sigma = implied_vol(
            quote.mid, env.spot, quote.strike, quote.expiry,
            env.rate, env.dividend_yield, quote.flag,
        )
    except ArbitrageViolationError as e:
        logger.debug(f"No implied vol for {quote.label}: {str(e)}")
        return quote
    return quote.model_copy(update={"implied_vol": sigma, "at_intrinsic": sigma == 0.0})


def load_chain(
    path: Union[str, Path],
    env: MarketEnvironment,
    max_rel_spread: float = MAX_REL_SPREAD,
) -> List[OptionQuote]:
    """
    Load an option chain CSV and drop illiquid contracts.

    The header ``expiry_years,strike,flag,exercise,bid,ask`` is required. A
    quote survives when (ask - bid) / mid <= max_rel_spread. Output is sorted
    by (expiry, strike, flag).

    Args:
        path: Chain CSV path
        env: Market environment (used for mid implied vols)
        max_rel_spread: Maximum relative bid/ask spread, in (0, 1]

    Returns:
        List of OptionQuote

    Raises:
        FileNotFoundError: If the file is missing
        ChainParseError: On a malformed header or row (with line number)
        NegativePriceError / CrossedMarketError: On invalid quotes
    """
    if not 0 < max_rel_spread <= 1:
        raise MarketDataError(f"max_rel_spread must lie in (0, 1], got {max_rel_spread}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Option chain not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ChainParseError(1, f"unreadable CSV ({str(e)})")

    missing = [c for c in CHAIN_COLUMNS if c not in frame.columns]
    if missing:
        raise ChainParseError(1, f"missing header columns {missing}; expected {','.join(CHAIN_COLUMNS)}")

    quotes: List[OptionQuote] = []
    dropped = 0
    for idx, row in enumerate(frame[CHAIN_COLUMNS].to_dict(orient="records")):
        line = idx + 2  # header is line 1
        fields = normalize_row(row, line)
        mid = (fields["bid"] + fields["ask"]) / 2
        if mid <= 0 or (fields["ask"] - fields["bid"]) / mid > max_rel_spread:
            dropped += 1
            continue
        try:
            quote = OptionQuote(**fields)
        except ValidationError as e:
            raise ChainParseError(line, str(e))
        quotes.append(_with_implied_vol(quote, env))

    quotes.sort(key=lambda q: (q.expiry, q.strike, q.flag))
    logger.info(f"Loaded {len(quotes)} quotes from {path.name} ({dropped} dropped by spread filter)")
    for expiry, counts in chain_summary(quotes).iterrows():
        logger.info(f"Expiry {expiry:g}: {int(counts['calls'])} calls, {int(counts['puts'])} puts")
    return quotes


def chain_summary(quotes: Sequence[OptionQuote]) -> pd.DataFrame:
    """Call/put counts per expiry, indexed by expiry."""
    frame = pd.DataFrame(
        {"expiry": [q.expiry for q in quotes], "call": [q.is_call for q in quotes]}
    )
    if frame.empty:
        return pd.DataFrame(columns=["calls", "puts", "total"])
    grouped = frame.groupby("expiry")["call"]
    summary = pd.DataFrame({"calls": grouped.sum().astype(int)})
    summary["puts"] = grouped.count() - summary["calls"]
    summary["total"] = summary["calls"] + summary["puts"]
    return summary


def write_chain(path: Union[str, Path], quotes: Sequence[OptionQuote]) -> Path:
    """Write quotes in the canonical chain CSV format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "expiry_years": [q.expiry for q in quotes],
            "strike": [q.strike for q in quotes],
            "flag": ["C" if q.is_call else "P" for q in quotes],
            "exercise": [q.exercise for q in quotes],
            "bid": [q.bid for q in quotes],
            "ask": [q.ask for q in quotes],
        }
    )
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def call_smile_vol(quotes: Sequence[OptionQuote], strike: float, expiry: float) -> Optional[float]:
    """
    Implied vol of the European call skew interpolated at (strike, expiry).

    Within an expiry the vols are interpolated linearly in strike with flat
    extrapolation; across expiries total variance is interpolated linearly in
    time (flat vol beyond the listed expiries).

    Args:
        quotes: Quotes carrying implied vols
        strike: Query strike
        expiry: Query expiry

    Returns:
        Interpolated vol, or None when no positive call vol is available
    """
    calls = [q for q in quotes if q.is_call and q.exercise == "E" and q.implied_vol]
    if not calls:
        return None
    by_expiry: Dict[float, List[OptionQuote]] = {}
    for q in calls:
        by_expiry.setdefault(q.expiry, []).append(q)

    def vol_at(t: float) -> float:
        slice_quotes = sorted(by_expiry[t], key=lambda q: q.strike)
        strikes = np.array([q.strike for q in slice_quotes])
        vols = np.array([q.implied_vol for q in slice_quotes])
        return float(np.interp(strike, strikes, vols))

    expiries = np.array(sorted(by_expiry))
    if expiry <= expiries[0]:
        return vol_at(float(expiries[0]))
    if expiry >= expiries[-1]:
        return vol_at(float(expiries[-1]))
    right = int(np.searchsorted(expiries, expiry))
    t0, t1 = float(expiries[right - 1]), float(expiries[right])
    w0, w1 = vol_at(t0) ** 2 * t0, vol_at(t1) ** 2 * t1
    total_variance = w0 + (w1 - w0) * (expiry - t0) / (t1 - t0)
    return math.sqrt(max(total_variance, 0.0) / expiry)


def vega_weight(vega: float, spread: float, vega_floor: float = VEGA_FLOOR) -> float:
    """
    Calibration weight (max(vega, floor))^-1 / spread.

    Raises:
        ZeroSpreadError: If the spread is not positive
    """
    if spread <= 0:
        raise ZeroSpreadError(f"bid/ask spread {spread} leaves the calibration weight undefined")
    return 1.0 / (max(vega, vega_floor) * spread)


def calibration_weights(
    quotes: Sequence[OptionQuote],
    env: MarketEnvironment,
    vega_floor: float = VEGA_FLOOR,
) -> List[float]:
    """
    Inverse-Vega, inverse-spread weight of each quote.

    Vega is evaluated at the call-skew vol interpolated at the quote's
    (strike, expiry), falling back to the quote's own implied vol.

    Args:
        quotes: Calibration quotes
        env: Market environment
        vega_floor: Lower cap on Vega (default 1e-2)

    Returns:
        Weights aligned with quotes

    Raises:
        ZeroSpreadError: If any quote has bid == ask
    """
    if vega_floor <= 0:
        raise MarketDataError("vega_floor must be positive")
    weights = []
    for q in quotes:
        sigma = call_smile_vol(quotes, q.strike, q.expiry)
        if sigma is None:
            sigma = q.implied_vol
        vega = 0.0
        if sigma:
            vega = float(bs_vega(env.spot, q.strike, q.expiry, sigma, env.rate, env.dividend_yield))
        weights.append(vega_weight(vega, q.spread, vega_floor))
    return weights


def with_weights(quotes: Sequence[OptionQuote], weights: Sequence[float]) -> List[OptionQuote]:
    """Return copies of quotes carrying the supplied weights."""
    if len(quotes) != len(weights):
        raise MarketDataError(f"{len(quotes)} quotes but {len(weights)} weights")
    return [q.model_copy(update={"weight": float(w)}) for q, w in zip(quotes, weights)]
