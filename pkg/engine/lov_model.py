"""LOV variance assembly: local variance plus the centred occupation correction."""
from dataclasses import dataclass, field
from typing import Literal, Optional, Tuple

import numpy as np

from config import VARIANCE_CAP, VARIANCE_FLOOR
from engine.occupation import CorridorPartition, gamma, pair_against
from engine.schemas import LovError, ModelConfig, PositivityReport
from engine.sensitivity import SensitivitySpec, Zero
from services.localvol import LocalVolSurface
from utils.logging_utils import format_fields, get_logger

logger = get_logger(__name__)

# Rows whose O and O_hat masses agree to this relative tolerance are treated as balanced.
MASS_BALANCE_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class VarianceEvaluation:
    """One step of variances for a batch of paths."""
    variance: np.ndarray  # clamped sigma^2
    raw: np.ndarray  # before clamping
    local_variance: np.ndarray
    pairing: np.ndarray  # sum_m l (O - O_hat)
    gamma: float
    clamped: np.ndarray  # bool mask

    @property
    def clamp_events(self) -> int:
        return int(np.count_nonzero(self.clamped))


@dataclass
class LovModel:
    """
    Surface, partition, sensitivity and clock bound into the LOV variance.

    additive:       sigma^2 = sigma_loc^2 + gamma * sum_m l (O_m - O_hat_m)
    multiplicative: sigma^2 = sigma_loc^2 * (1 + gamma * sum_m l (O_m - O_hat_m))

    gamma is the inverse of the tracked discrete mass by default, or the
    continuous-clock kappa / (e^{kappa t} - 1). The result is clamped to
    [floor, cap] and clamp events are counted on the model.
    """
    surface: LocalVolSurface
    partition: CorridorPartition
    spec: SensitivitySpec = field(default_factory=Zero)
    mode: Literal["additive", "multiplicative"] = "additive"
    kappa: float = 0.0
    floor: float = VARIANCE_FLOOR
    cap: float = VARIANCE_CAP
    discrete_gamma: bool = True
    uncentered: bool = False
    clamp_events: int = 0

    def __post_init__(self) -> None:
        if not (self.floor > 0 and self.cap > self.floor):
            raise LovError(f"variance clamp must satisfy 0 < floor < cap, got [{self.floor}, {self.cap}]")
        if self.mode not in ("additive", "multiplicative"):
            raise LovError(f"unknown LOV mode {self.mode!r}")
        if self.kappa < 0:
            raise LovError(f"kappa must be >= 0, got {self.kappa}")

    @classmethod
    def from_config(
        cls,
        model_config: ModelConfig,
        surface: LocalVolSurface,
        partition: CorridorPartition,
        spec: SensitivitySpec,
    ) -> "LovModel":
        floor, cap = model_config.clamp
        return cls(
            surface=surface,
            partition=partition,
            spec=spec,
            mode=model_config.mode,
            kappa=model_config.kappa,
            floor=floor,
            cap=cap,
            discrete_gamma=model_config.discrete_gamma,
            uncentered=model_config.uncentered,
        )

    @property
    def multiplicative(self) -> bool:
        return self.mode == "multiplicative"

    def with_spec(self, spec: SensitivitySpec) -> "LovModel":
        return LovModel(
            surface=self.surface,
            partition=self.partition,
            spec=spec,
            mode=self.mode,
            kappa=self.kappa,
            floor=self.floor,
            cap=self.cap,
            discrete_gamma=self.discrete_gamma,
            uncentered=self.uncentered,
        )

    def gamma_at(self, t: float, mass: float) -> float:
        """Normalisation of the occupation flow; 0 while the measure is empty."""
        if mass <= 0:
            return 0.0
        if self.discrete_gamma:
            return 1.0 / mass
        return gamma(self.kappa, t)

    def local_variance(self, t: float, spots: np.ndarray) -> np.ndarray:
        return np.asarray(self.surface.at(t, spots), dtype=float) ** 2

    def variance(
        self,
        t: float,
        spots: np.ndarray,
        times: np.ndarray,
        projected: Optional[np.ndarray],
        mass: float,
        record: bool = True,
    ) -> VarianceEvaluation:
        """
        LOV variance for every path at step time t.

        Args:
            t: Step time t_n
            spots: X_{t_n}, shape (J,)
            times: Occupation times O, shape (J, M)
            projected: Projected occupation O_hat, shape (J, M) (ignored when uncentered)
            mass: Common total mass of O
            record: Add clamp events to the model counter

        Returns:
            VarianceEvaluation
        """
        spots = np.atleast_1d(np.asarray(spots, dtype=float))
        if self.spec.is_zero or mass <= 0:
            ell = None
        else:
            ell = self.spec.eval_batch(t, spots, self.partition.nodes)
        return self.variance_from_values(t, spots, ell, times, projected, mass, record)

    def variance_from_values(
        self,
        t: float,
        spots: np.ndarray,
        ell: Optional[np.ndarray],
        times: np.ndarray,
        projected: Optional[np.ndarray],
        mass: float,
        record: bool = True,
    ) -> VarianceEvaluation:
        """Same as ``variance`` with the sensitivity matrix l(t, X_j, x_m) supplied (None for zero)."""
        spots = np.atleast_1d(np.asarray(spots, dtype=float))
        local_var = self.local_variance(t, spots)
        g = self.gamma_at(t, mass)
        if ell is None or g == 0.0:
            pairing = np.zeros_like(local_var)
            raw = local_var.copy()
        else:
            times = np.atleast_2d(times)
            centre = np.zeros_like(times) if self.uncentered else np.atleast_2d(projected)
            pairing = self._pairing(np.atleast_2d(ell), times, centre)
            correction = g * pairing
            raw = local_var * (1.0 + correction) if self.multiplicative else local_var + correction
        variance = np.clip(raw, self.floor, self.cap)
        clamped = (raw < self.floor) | (raw > self.cap)
        count = int(np.count_nonzero(clamped))
        if count and record:
            self.clamp_events += count
            logger.debug(f"variance clamped {format_fields(t=t, paths=count)}")
        return VarianceEvaluation(
            variance=variance,
            raw=raw,
            local_variance=local_var,
            pairing=pairing,
            gamma=g,
            clamped=clamped,
        )

    def _pairing(self, ell: np.ndarray, times: np.ndarray, centre: np.ndarray) -> np.ndarray:
        # On mass-balanced rows l is shifted by its first-node value, which leaves
        # the pairing unchanged and makes a constant l cancel to exactly zero.
        if self.uncentered:
            return np.atleast_1d(pair_against(times, ell, centre))
        o_mass = times.sum(axis=-1)
        residual = np.abs(o_mass - centre.sum(axis=-1))
        balanced = residual <= MASS_BALANCE_TOLERANCE * np.maximum(o_mass, 1.0)
        shifted = np.where(balanced[:, None], ell - ell[:, :1], ell)
        return np.atleast_1d(pair_against(times, shifted, centre))

    def variance_derivatives(
        self,
        t: float,
        spots: np.ndarray,
        times: np.ndarray,
        projected: np.ndarray,
        mass: float,
        evaluation: VarianceEvaluation,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """
        d sigma^2 / d X_t per path and the weights W with d sigma^2 / d theta = sum_m W_m d l_m / d theta.

        O and O_hat are held fixed (indicators and frozen projection weights).
        Clamped paths get zero derivatives.

        Returns:
            (spot derivative (J,), parameter weights (J, M))
        """
        spots = np.atleast_1d(np.asarray(spots, dtype=float))
        sigma_loc = np.sqrt(evaluation.local_variance)
        d_local = 2.0 * sigma_loc * np.asarray(self.surface.slope_log_spot(t, spots)) / spots
        g = evaluation.gamma
        if self.spec.is_zero or g == 0.0:
            weights = np.zeros((spots.size, self.partition.size))
            d_spot = d_local.copy()
        else:
            centre = np.zeros_like(times) if self.uncentered else projected
            diff = np.atleast_2d(times) - np.atleast_2d(centre)
            dell = self.spec.spot_gradient_batch(t, spots, self.partition.nodes)
            base = evaluation.local_variance[:, None] if self.multiplicative else 1.0
            weights = base * g * diff
            d_spot = np.sum(weights * dell, axis=-1)
            if self.multiplicative:
                d_spot = d_spot + d_local * (1.0 + g * evaluation.pairing)
            else:
                d_spot = d_spot + d_local
        live = ~evaluation.clamped
        return np.where(live, d_spot, 0.0), weights * live[:, None]


def check_positivity_bound(
    model: LovModel,
    horizon: float,
    time_points: int = 25,
    spots: Optional[np.ndarray] = None,
) -> PositivityReport:
    """
    Check sup_x |l(t, X, x)| < bound(t, X) on a (t, X) grid.

    The bound is sigma_loc^2(t, X) / 2 in additive mode and 1/2 in
    multiplicative mode; the supremum runs over the corridor nodes.

    Args:
        model: LOV model
        horizon: Last time checked
        time_points: Number of equally spaced times in [0, horizon]
        spots: X grid (defaults to the corridor nodes)

    Returns:
        PositivityReport with the smallest margin bound - sup|l|
    """
    spots = model.partition.nodes if spots is None else np.asarray(spots, dtype=float)
    nodes = model.partition.nodes
    worst = (np.inf, 0.0, float(spots[0]))
    for t in np.linspace(0.0, horizon, time_points):
        sup_ell = np.max(np.abs(model.spec.eval_batch(float(t), spots, nodes)), axis=1)
        if model.multiplicative:
            bound = np.full(spots.shape, 0.5)
        else:
            bound = 0.5 * model.local_variance(float(t), spots)
        margin = bound - sup_ell
        k = int(np.argmin(margin))
        if margin[k] < worst[0]:
            worst = (float(margin[k]), float(t), float(spots[k]))
    report: PositivityReport = {
        "passed": worst[0] > 0,
        "worst_margin": worst[0],
        "worst_t": worst[1],
        "worst_spot": worst[2],
        "points_checked": int(time_points * spots.size),
    }
    level = "info" if report["passed"] else "warning"
    getattr(logger, level)(f"positivity bound {format_fields(**report)}")
    return report
