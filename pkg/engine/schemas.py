"""Data models, run configurations and errors for the LOV engine."""
from datetime import date
from typing import Dict, List, Literal, Optional, Tuple, TypedDict

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import config

PolicyPaths = Literal["independent", "split", "in_sample"]


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class LovError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class MarketDataError(LovError):
    """Invalid or unusable market data."""


class ChainParseError(MarketDataError):
    """Option-chain row that cannot be parsed."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NegativePriceError(MarketDataError):
    """Negative bid or ask."""


class CrossedMarketError(MarketDataError):
    """Bid above ask."""


class ArbitrageViolationError(MarketDataError):
    """Price outside the Black-Scholes no-arbitrage bounds."""


class ZeroSpreadError(MarketDataError):
    """Bid equals ask, so the calibration weight is undefined."""


class SurfaceError(LovError):
    """Malformed volatility surface."""


class PartitionError(LovError):
    """Corridor partition cannot be built."""


class OccupationError(LovError):
    """Invalid occupation-measure operation."""


class SensitivityError(LovError):
    """Invalid sensitivity specification or parameters."""


class SimulationError(LovError):
    """Non-finite state encountered during path simulation."""

    def __init__(self, message: str, step: Optional[int] = None, path: Optional[int] = None):
        self.step = step
        self.path = path
        location = ""
        if step is not None:
            location += f" at step {step}"
        if path is not None:
            location += f" on path {path}"
        super().__init__(f"{message}{location}")


class PricingError(LovError):
    """Instrument cannot be priced on the supplied ensemble."""


class CalibrationError(LovError):
    """Calibration cannot proceed."""


# ---------------------------------------------------------------------------
# Market data
# ---------------------------------------------------------------------------

class MarketEnvironment(BaseModel):
    """Spot, carry and valuation date shared by every instrument."""
    model_config = ConfigDict(frozen=True)

    spot: float = Field(gt=0)
    rate: float = 0.0
    dividend_yield: float = Field(default=0.0, ge=0)
    valuation_date: date = Field(default_factory=date.today)


class OptionQuote(BaseModel):
    """Listed option with bid/ask quotes and its calibration weight."""
    model_config = ConfigDict(frozen=True)

    strike: float = Field(gt=0)
    expiry: float = Field(gt=0)  # year fraction
    flag: Literal[1, -1]  # +1 call, -1 put
    exercise: Literal["E", "A"]
    bid: float = Field(ge=0)
    ask: float = Field(ge=0)
    weight: float = Field(default=0.0, ge=0)
    implied_vol: Optional[float] = None  # Black-Scholes vol of the mid, when within bounds
    at_intrinsic: bool = False

    @model_validator(mode="after")
    def _check_not_crossed(self) -> "OptionQuote":
        if self.bid > self.ask:
            raise ValueError(f"crossed market: bid {self.bid} > ask {self.ask}")
        return self

    @property
    def mid(self) -> float:
        return (self.bid + self.ask) / 2

    @property
    def spread(self) -> float:
        return self.ask - self.bid

    @property
    def is_call(self) -> bool:
        return self.flag == 1

    @property
    def is_american(self) -> bool:
        return self.exercise == "A"

    @property
    def label(self) -> str:
        kind = "C" if self.is_call else "P"
        return f"{kind}{self.exercise} K={self.strike:g} T={self.expiry:g}"


# ---------------------------------------------------------------------------
# Run configurations (JSON)
# ---------------------------------------------------------------------------

class NetworkConfig(BaseModel):
    """Feedforward sensitivity network settings."""
    model_config = ConfigDict(extra="forbid")

    hidden_sizes: List[int] = Field(default_factory=lambda: list(config.NETWORK_LAYER_SIZES[1:-1]))
    output_shift: bool = False
    output_scale: float = Field(default=1.0, gt=0)
    seed: int = config.NETWORK_INIT_SEED

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if not value or any(width < 1 for width in value):
            raise ValueError("hidden_sizes must be a non-empty list of positive widths")
        return value


class SensitivityConfig(BaseModel):
    """Choice of sensitivity family and its parameters."""
    model_config = ConfigDict(extra="forbid")

    variant: Literal["zero", "constant", "one_factor", "tanh", "ema_log", "neural"] = "zero"
    value: float = 0.0  # constant
    beta: float = 0.0  # one_factor, ema_log
    corridors: List[int] = Field(default_factory=list)  # one_factor index set A (0-based)
    alpha: float = 1.0  # tanh
    scale: Optional[float] = None  # tanh; defaults to a quarter of the minimum local variance
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    checkpoint: Optional[str] = None  # neural theta file


class PartitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    corridors: int = Field(default=config.DEFAULT_CORRIDORS, ge=1, alias="M")
    band_multiplier: float = Field(default=config.DEFAULT_BAND_MULTIPLIER, gt=0)
    sigma_ref: Optional[float] = Field(default=None, gt=0)


class ModelConfig(BaseModel):
    """LOV model assembly: variance form, clock, clamp and sensitivity."""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["additive", "multiplicative"] = "additive"
    kappa: float = Field(default=config.DEFAULT_KAPPA, ge=0)
    clamp: Tuple[float, float] = (config.VARIANCE_FLOOR, config.VARIANCE_CAP)
    discrete_gamma: bool = True
    uncentered: bool = False
    spec: SensitivityConfig = Field(default_factory=SensitivityConfig)
    surface_file: Optional[str] = None
    partition: PartitionConfig = Field(default_factory=PartitionConfig)

    @field_validator("clamp")
    @classmethod
    def _ordered_clamp(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        floor, cap = value
        if not (floor > 0 and cap > floor):
            raise ValueError("clamp must satisfy 0 < floor < cap")
        return value


class SimConfig(BaseModel):
    """Simulation grid and particle settings."""
    model_config = ConfigDict(extra="forbid")

    horizon: float = Field(gt=0)  # T
    steps: int = Field(ge=1)  # N
    paths: int = Field(ge=2)  # J, antithetic pairs (j, j + J/2)
    seed: int = config.DEFAULT_SEED
    bandwidth_multiplier: float = Field(default=config.BANDWIDTH_MULTIPLIER, gt=0)
    kernel: Literal["quartic"] = "quartic"
    record_paths: bool = False

    @field_validator("paths")
    @classmethod
    def _even_paths(cls, value: int) -> int:
        if value % 2:
            raise ValueError("paths must be even (antithetic pairs)")
        return value

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


class SimulateConfig(BaseModel):
    """Top-level JSON for the ``simulate`` and ``price`` commands."""
    model_config = ConfigDict(extra="forbid")

    schema_version: str = config.SCHEMA_VERSION
    simulation: SimConfig
    environment: MarketEnvironment
    model: ModelConfig = Field(default_factory=ModelConfig)
    policy_paths: PolicyPaths = config.LSMC_POLICY_PATHS


class CalibrationConfig(BaseModel):
    """Top-level JSON for the ``calibrate`` and ``report`` commands."""
    model_config = ConfigDict(extra="forbid")

    schema_version: str = config.SCHEMA_VERSION
    model: ModelConfig = Field(default_factory=lambda: ModelConfig(spec=SensitivityConfig(variant="neural")))
    steps_per_year: int = Field(default=config.STEPS_PER_YEAR, ge=1)
    bandwidth_multiplier: float = Field(default=config.BANDWIDTH_MULTIPLIER, gt=0)
    learning_rate: float = Field(default=config.ADAM_LEARNING_RATE, gt=0)
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    adam_epsilon: float = config.ADAM_EPSILON
    batch_schedule: List[Tuple[int, int]] = Field(default_factory=lambda: list(config.BATCH_SCHEDULE))
    max_epochs: int = Field(default=config.MAX_EPOCHS, ge=1)
    stopping_window: int = Field(default=config.STOPPING_WINDOW, ge=1)
    stopping_range_fraction: float = Field(default=config.STOPPING_RANGE_FRACTION, gt=0)
    checkpoint_every: int = Field(default=config.CHECKPOINT_EVERY, ge=1)
    seed: int = config.DEFAULT_SEED
    holdout_seed: int = config.DEFAULT_SEED + 1_000_003
    final_pairs: int = Field(default=config.FINAL_PRICING_PAIRS, ge=1)
    gradient_method: Literal["pathwise", "finite_difference"] = "pathwise"
    fd_step: float = Field(default=1e-4, gt=0)
    max_rel_spread: float = Field(default=config.MAX_REL_SPREAD, gt=0, le=1)
    vega_floor: float = Field(default=config.VEGA_FLOOR, gt=0)
    itm_only: bool = True
    exercise_every: int = Field(default=1, ge=1)  # exercise dates every k simulation steps
    policy_paths: PolicyPaths = config.LSMC_POLICY_PATHS

    @field_validator("batch_schedule")
    @classmethod
    def _schedule_sorted(cls, value: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
        if not value or value[0][0] != 0:
            raise ValueError("batch_schedule must start at epoch 0")
        epochs = [epoch for epoch, _ in value]
        if epochs != sorted(epochs) or any(pairs < 1 for _, pairs in value):
            raise ValueError("batch_schedule must be sorted by epoch with positive pair counts")
        return value


# ---------------------------------------------------------------------------
# Report records
# ---------------------------------------------------------------------------

class SimulationSummary(TypedDict):
    """Summary JSON written by ``simulate``."""
    paths: int
    steps: int
    horizon: float
    clamp_events: int
    mass: float
    mass_residual: float
    runtime_seconds: float
    mean_terminal: float


class PriceRecord(TypedDict):
    """One priced instrument."""
    strike: float
    expiry: float
    flag: str
    exercise: str
    price: float
    std_error: float


class InstrumentReport(TypedDict):
    """Calibrated model price against its market band."""
    strike: float
    expiry: float
    flag: str
    model_price: float
    bid: float
    ask: float
    in_band: bool


class PositivityReport(TypedDict):
    """Outcome of the sufficient positivity condition check."""
    passed: bool
    worst_margin: float
    worst_t: float
    worst_spot: float
    points_checked: int


class CalibrationReport(TypedDict, total=False):
    """Final report of a calibration run."""
    converged: bool
    epochs: int
    best_epoch: int
    best_loss: float
    final_loss: float
    alpha: float
    instruments: int
    in_band_fraction: float
    wall_time_seconds: float
    gradient_method: str
    policy_paths: str
    loss_history: List[float]
    final_prices: List[float]


class RunManifest(TypedDict, total=False):
    """Provenance written before every CLI exit."""
    command: str
    status: str
    exit_code: int
    error: Optional[str]
    config: Dict[str, object]
    seed: Optional[int]
    versions: Dict[str, str]
    inputs: Dict[str, str]
    started_at: str
    runtime_seconds: float
    schema_version: str
