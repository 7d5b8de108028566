"""Volatility surfaces: bilinear lookup, CSV I/O and Dupire extraction."""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pandas as pd

from config import VARIANCE_CAP, VARIANCE_FLOOR
from engine.schemas import MarketEnvironment, SurfaceError
from utils.logging_utils import get_logger

logger = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]


def _validate_grid(time_grid: np.ndarray, strike_grid: np.ndarray, values: np.ndarray, name: str) -> None:
    if time_grid.ndim != 1 or strike_grid.ndim != 1:
        raise SurfaceError(f"{name}: grids must be one-dimensional")
    if len(time_grid) < 2 or len(strike_grid) < 2:
        raise SurfaceError(f"{name}: need at least 2 times and 2 strikes, got {values.shape}")
    if values.shape != (len(time_grid), len(strike_grid)):
        raise SurfaceError(
            f"{name}: values shape {values.shape} does not match grid ({len(time_grid)}, {len(strike_grid)})"
        )
    if np.any(np.diff(time_grid) <= 0) or np.any(np.diff(strike_grid) <= 0):
        raise SurfaceError(f"{name}: grids must be strictly ascending")
    if np.any(time_grid < 0) or np.any(strike_grid <= 0):
        raise SurfaceError(f"{name}: times must be >= 0 and strikes > 0")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise SurfaceError(f"{name}: all vols must be finite and positive")


@dataclass(frozen=True, eq=False)
class VolSurface:
    """
    Vol grid over (time, strike) with bilinear lookup in (t, ln x).

    Queries outside the grid are clamped to the edges (flat extrapolation),
    so every value returned is a convex combination of stored vols.
    """
    time_grid: np.ndarray
    strike_grid: np.ndarray
    values: np.ndarray
    adjusted_nodes: Tuple[Tuple[int, int], ...] = field(default=())

    def __post_init__(self) -> None:
        for name in ("time_grid", "strike_grid", "values"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        _validate_grid(self.time_grid, self.strike_grid, self.values, type(self).__name__)
        log_strikes = np.log(self.strike_grid)
        log_strikes.setflags(write=False)
        object.__setattr__(self, "_log_strikes", log_strikes)

    def _cell(self, t: ArrayLike, x: ArrayLike):
        t = np.clip(np.asarray(t, dtype=float), self.time_grid[0], self.time_grid[-1])
        y_raw = np.log(np.asarray(x, dtype=float))
        y = np.clip(y_raw, self._log_strikes[0], self._log_strikes[-1])
        i = np.clip(np.searchsorted(self.time_grid, t, side="right") - 1, 0, len(self.time_grid) - 2)
        j = np.clip(np.searchsorted(self._log_strikes, y, side="right") - 1, 0, len(self._log_strikes) - 2)
        wt = (t - self.time_grid[i]) / (self.time_grid[i + 1] - self.time_grid[i])
        dy = self._log_strikes[j + 1] - self._log_strikes[j]
        wy = (y - self._log_strikes[j]) / dy
        inside = (y_raw > self._log_strikes[0]) & (y_raw < self._log_strikes[-1])
        return i, j, wt, wy, dy, inside

    def at(self, t: ArrayLike, x: ArrayLike) -> ArrayLike:
        """Interpolated vol at (t, x); broadcast over arrays."""
        i, j, wt, wy, _, _ = self._cell(t, x)
        v = self.values
        lower = (1 - wy) * v[i, j] + wy * v[i, j + 1]
        upper = (1 - wy) * v[i + 1, j] + wy * v[i + 1, j + 1]
        out = (1 - wt) * lower + wt * upper
        return float(out) if np.ndim(out) == 0 else out

    def slope_log_spot(self, t: ArrayLike, x: ArrayLike) -> ArrayLike:
        """d vol / d ln x of the bilinear interpolant (0 in the flat wings)."""
        i, j, wt, _, dy, inside = self._cell(t, x)
        v = self.values
        slope = ((1 - wt) * (v[i, j + 1] - v[i, j]) + wt * (v[i + 1, j + 1] - v[i + 1, j])) / dy
        out = np.where(inside, slope, 0.0)
        return float(out) if np.ndim(out) == 0 else out


class LocalVolSurface(VolSurface):
    """Local volatility sigma_loc(t, x)."""


class ImpliedVolSurface(VolSurface):
    """Black-Scholes implied vols on a (expiry, strike) grid."""


def lv_at(surface: LocalVolSurface, t: ArrayLike, x: ArrayLike) -> ArrayLike:
    """
    Local vol at (t, x): bilinear in (t, ln x), flat beyond the grid.

    Args:
        surface: Local vol surface
        t: Year fraction(s), >= 0
        x: Price(s), > 0

    Returns:
        Strictly positive vol(s)
    """
    return surface.at(t, x)


def min_local_variance(surface: LocalVolSurface, t_max: float) -> float:
    """
    Minimum stored local variance over grid times t <= t_max.

    When t_max precedes the first grid time, the first row is used since
    queries there are flat-extrapolated from it.
    """
    if t_max <= 0:
        raise SurfaceError(f"t_max must be positive, got {t_max}")
    rows = surface.time_grid <= t_max
    if not np.any(rows):
        rows = np.zeros_like(rows)
        rows[0] = True
    return float(np.min(surface.values[rows]) ** 2)


def flat_surface(vol: float, horizon: float, spot: float, width: float = 10.0) -> LocalVolSurface:
    """Constant local vol on a 2x2 grid covering [0, horizon] x [spot/width, spot*width]."""
    return LocalVolSurface(
        time_grid=np.array([0.0, horizon]),
        strike_grid=np.array([spot / width, spot * width]),
        values=np.full((2, 2), float(vol)),
    )


def atm_forward_vol(surface: VolSurface, env: MarketEnvironment, expiry: float) -> float:
    """Vol at the forward strike for the given expiry."""
    forward = env.spot * np.exp((env.rate - env.dividend_yield) * expiry)
    return float(surface.at(expiry, forward))


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def load_surface_csv(path: Union[str, Path], kind: str = "local") -> VolSurface:
    """
    Read a surface CSV: first row strikes, first column times, body vols.

    Args:
        path: CSV path
        kind: "local" or "implied"

    Returns:
        LocalVolSurface or ImpliedVolSurface

    Raises:
        FileNotFoundError: If the file is missing
        SurfaceError: If the grid is malformed
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Surface file not found: {path}")
    try:
        frame = pd.read_csv(path, index_col=0)
        strikes = np.array([float(c) for c in frame.columns])
        times = frame.index.to_numpy(dtype=float)
        values = frame.to_numpy(dtype=float)
    except (ValueError, pd.errors.ParserError) as e:
        raise SurfaceError(f"Failed to parse surface {path}: {str(e)}")
    cls = ImpliedVolSurface if kind == "implied" else LocalVolSurface
    surface = cls(time_grid=times, strike_grid=strikes, values=values)
    logger.info(f"Loaded {kind} surface {path.name}: {len(times)} times x {len(strikes)} strikes")
    return surface


def write_surface_csv(path: Union[str, Path], surface: VolSurface) -> Path:
    """Write a surface in the CSV layout read by load_surface_csv."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        surface.values,
        index=pd.Index(surface.time_grid, name="t"),
        columns=[repr(float(k)) for k in surface.strike_grid],
    )
    frame.to_csv(path, float_format="%.17g", lineterminator="\n")
    return path


# ---------------------------------------------------------------------------
# Dupire
# ---------------------------------------------------------------------------

def _second_derivative(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Three-point second derivative along axis 1 on a non-uniform grid; edges copy neighbours."""
    out = np.empty_like(values)
    h_left = grid[1:-1] - grid[:-2]
    h_right = grid[2:] - grid[1:-1]
    out[:, 1:-1] = 2.0 * (
        values[:, 2:] * h_left
        - values[:, 1:-1] * (h_left + h_right)
        + values[:, :-2] * h_right
    ) / (h_left * h_right * (h_left + h_right))
    out[:, 0] = out[:, 1]
    out[:, -1] = out[:, -2]
    return out


def dupire_from_implied(
    iv: ImpliedVolSurface,
    env: MarketEnvironment,
    variance_floor: float = VARIANCE_FLOOR,
    variance_cap: float = VARIANCE_CAP,
) -> LocalVolSurface:
    """
    Local vol from implied vols via Dupire in total-variance form.

    With w = sigma_imp^2 T and y = ln(K / F_T), the local variance is
    dw/dT / (1 - (y/w) w_y + 1/4 (-1/4 - 1/w + y^2/w^2) w_y^2 + 1/2 w_yy).
    Derivatives are finite differences on the grid (central inside, one-sided
    at the edges). dw/dT is taken at fixed y, i.e. dw/dT|_K + (r - q) w_y.
    Nodes with a non-positive numerator or denominator, or a variance outside
    [variance_floor, variance_cap], are clamped and listed in adjusted_nodes.

    Args:
        iv: Implied vol surface (at least 3x3)
        env: Market environment (spot and carry for forwards)
        variance_floor: Minimum local variance
        variance_cap: Maximum local variance

    Returns:
        LocalVolSurface on the same grid

    Raises:
        SurfaceError: If the grid is smaller than 3x3 or includes T = 0
    """
    times, strikes = iv.time_grid, iv.strike_grid
    if len(times) < 3 or len(strikes) < 3:
        raise SurfaceError(f"Dupire needs at least a 3x3 grid, got {iv.values.shape}")
    if times[0] <= 0:
        raise SurfaceError("Dupire needs strictly positive expiries")

    log_strikes = np.log(strikes)
    total_var = iv.values ** 2 * times[:, None]
    forwards = env.spot * np.exp((env.rate - env.dividend_yield) * times)
    y = log_strikes[None, :] - np.log(forwards)[:, None]

    w_y = np.gradient(total_var, log_strikes, axis=1)
    w_yy = _second_derivative(total_var, log_strikes)
    w_t = np.gradient(total_var, times, axis=0) + (env.rate - env.dividend_yield) * w_y

    w = total_var
    denominator = (
        1.0
        - (y / w) * w_y
        + 0.25 * (-0.25 - 1.0 / w + y ** 2 / w ** 2) * w_y ** 2
        + 0.5 * w_yy
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        local_var = w_t / denominator

    bad = ~np.isfinite(local_var) | (denominator <= 0) | (w_t <= 0)
    low = ~bad & (local_var < variance_floor)
    high = ~bad & (local_var > variance_cap)
    local_var = np.where(bad | low, variance_floor, local_var)
    local_var = np.where(high, variance_cap, local_var)

    adjusted = tuple(
        (int(i), int(j)) for i, j in zip(*np.nonzero(bad | low | high))
    )
    if adjusted:
        logger.warning(
            f"Dupire: {len(adjusted)} node(s) clamped to [{variance_floor:g}, {variance_cap:g}]; "
            f"first {adjusted[:5]}"
        )
    return LocalVolSurface(
        time_grid=times,
        strike_grid=strikes,
        values=np.sqrt(local_var),
        adjusted_nodes=adjusted,
    )
