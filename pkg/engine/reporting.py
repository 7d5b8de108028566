"""Plot-ready CSV tables, price tables and run manifests."""
import platform
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
import pydantic
import scipy

import config
from engine.schemas import (
    ArbitrageViolationError,
    InstrumentReport,
    LovError,
    MarketEnvironment,
    OptionQuote,
    PriceRecord,
    RunManifest,
)
from engine.sensitivity import SensitivitySpec
from engine.simulator import PathEnsemble
from services.black_scholes import implied_vol
from utils.io_utils import sha256_file, write_json
from utils.logging_utils import get_logger

logger = get_logger(__name__)

PathLike = Union[str, Path]

PLOT_KINDS = ("smile", "sensitivity_slice", "occupation_snapshot", "loss_curve")
PRICE_COLUMNS = ["strike", "expiry", "flag", "exercise", "price", "std_error"]
INSTRUMENT_COLUMNS = ["strike", "expiry", "flag", "model_price", "bid", "ask", "in_band"]


def _write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def sensitivity_slice(spec: SensitivitySpec, t: float, spot: float, nodes: np.ndarray) -> pd.DataFrame:
    """x -> l(t, X, x) over the node grid."""
    nodes = np.asarray(nodes, dtype=float)
    ell = spec.eval_batch(t, np.array([spot], dtype=float), nodes)[0]
    return pd.DataFrame({"x": nodes, "ell": ell})


def occupation_snapshot(ensemble: PathEnsemble, path: int = 0) -> pd.DataFrame:
    """Realised and projected occupation times of one path at the horizon."""
    if not 0 <= path < ensemble.paths:
        raise LovError(f"path {path} outside 0..{ensemble.paths - 1}")
    return pd.DataFrame({
        "node": ensemble.partition.nodes,
        "realized": ensemble.occupation[path],
        "projected": ensemble.projected[path],
    })


def smile_table(
    quotes: Sequence[OptionQuote],
    model_prices: Sequence[float],
    env: MarketEnvironment,
) -> pd.DataFrame:
    """Market and model implied vols of European quotes, ordered by (expiry, strike)."""
    rows = []
    for q, price in zip(quotes, model_prices):
        if q.is_american:
            continue
        try:
            model_iv = implied_vol(price, env.spot, q.strike, q.expiry, env.rate, env.dividend_yield, q.flag)
        except ArbitrageViolationError:
            model_iv = float("nan")
        rows.append({
            "expiry": q.expiry,
            "strike": q.strike,
            "flag": "C" if q.is_call else "P",
            "market_iv": q.implied_vol if q.implied_vol is not None else float("nan"),
            "model_iv": model_iv,
        })
    frame = pd.DataFrame(rows, columns=["expiry", "strike", "flag", "market_iv", "model_iv"])
    return frame.sort_values(["expiry", "strike", "flag"], kind="mergesort").reset_index(drop=True)


def loss_curve(history: pd.DataFrame) -> pd.DataFrame:
    """Calibration history with its alpha column, as logged."""
    missing = {"epoch", "loss", "alpha", "J"} - set(history.columns)
    if missing:
        raise LovError(f"loss history lacks columns {sorted(missing)}")
    return history[["epoch", "loss", "alpha", "J"]].sort_values("epoch").reset_index(drop=True)


_TABLES = {
    "smile": smile_table,
    "sensitivity_slice": sensitivity_slice,
    "occupation_snapshot": occupation_snapshot,
    "loss_curve": loss_curve,
}


def emit_plot_data(kind: str, path: PathLike, /, **inputs: Any) -> Path:
    """
    Tabulate one plot kind and write it as CSV.

    Args:
        kind: smile, sensitivity_slice, occupation_snapshot or loss_curve
        path: Output CSV path
        **inputs: Keyword arguments of the matching table builder

    Returns:
        Path written

    Raises:
        LovError: On an unknown kind or missing inputs
    """
    if kind not in _TABLES:
        raise LovError(f"unknown plot kind {kind!r}; expected one of {', '.join(PLOT_KINDS)}")
    try:
        frame = _TABLES[kind](**inputs)
    except TypeError as e:
        raise LovError(f"{kind}: missing or unexpected inputs ({str(e)})")
    logger.info(f"Plot data {kind}: {len(frame)} rows -> {path}")
    return _write_csv(path, frame)


def price_records(quotes: Sequence[OptionQuote], prices: Sequence[float], errors: Sequence[float]) -> List[PriceRecord]:
    return [
        {
            "strike": q.strike,
            "expiry": q.expiry,
            "flag": "C" if q.is_call else "P",
            "exercise": q.exercise,
            "price": float(p),
            "std_error": float(e),
        }
        for q, p, e in zip(quotes, prices, errors)
    ]


def write_prices(path: PathLike, records: Iterable[PriceRecord]) -> Path:
    return _write_csv(path, pd.DataFrame(list(records), columns=PRICE_COLUMNS))


def instrument_reports(quotes: Sequence[OptionQuote], prices: Sequence[float]) -> List[InstrumentReport]:
    """Model price of each instrument against its bid/ask band."""
    return [
        {
            "strike": q.strike,
            "expiry": q.expiry,
            "flag": "C" if q.is_call else "P",
            "model_price": float(p),
            "bid": q.bid,
            "ask": q.ask,
            "in_band": bool(q.bid <= p <= q.ask),
        }
        for q, p in zip(quotes, prices)
    ]


def write_instrument_reports(path: PathLike, reports: Iterable[InstrumentReport]) -> Path:
    return _write_csv(path, pd.DataFrame(list(reports), columns=INSTRUMENT_COLUMNS))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
    }


def input_digests(paths: Mapping[str, Optional[PathLike]]) -> Dict[str, str]:
    """SHA-256 of every existing input file, keyed by flag name."""
    return {
        name: sha256_file(p)
        for name, p in sorted(paths.items())
        if p is not None and Path(p).is_file()
    }


def build_manifest(
    command: str,
    started_at: datetime,
    runtime_seconds: float,
    exit_code: int,
    error: Optional[str] = None,
    resolved_config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
    inputs: Optional[Mapping[str, Optional[PathLike]]] = None,
) -> RunManifest:
    return {
        "command": command,
        "status": "ok" if exit_code == 0 else "failed",
        "exit_code": exit_code,
        "error": error,
        "config": resolved_config or {},
        "seed": seed,
        "versions": library_versions(),
        "inputs": input_digests(inputs or {}),
        "started_at": started_at.astimezone(timezone.utc).isoformat(),
        "runtime_seconds": runtime_seconds,
        "schema_version": config.SCHEMA_VERSION,
    }


def write_manifest(out_dir: PathLike, manifest: RunManifest) -> Path:
    return write_json(Path(out_dir) / "manifest.json", manifest)
