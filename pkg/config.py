"""Configuration constants for the LOV Monte Carlo engine."""
import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


# Logging / runtime
LOG_LEVEL = os.getenv("LOV_LOG_LEVEL", "INFO")
WORKERS = _env_int("LOV_WORKERS", os.cpu_count() or 1)
DEFAULT_SEED = _env_int("LOV_DEFAULT_SEED", 20250915)

# Occupation flow / simulation grid
DEFAULT_KAPPA = _env_float("LOV_KAPPA", 12.0)  # one-month exponential clock
DEFAULT_CORRIDORS = _env_int("LOV_CORRIDORS", 63)
DEFAULT_BAND_MULTIPLIER = 2.0  # nodes span x0 * (1 +/- 2 sigma sqrt(T))
NODE_FLOOR_FRACTION = 1e-6
STEPS_PER_YEAR = _env_int("LOV_STEPS_PER_YEAR", 252)

# Particle projection
BANDWIDTH_MULTIPLIER = _env_float("LOV_BANDWIDTH_MULTIPLIER", 1.5)
BANDWIDTH_FLOOR_FRACTION = 1e-8

# Variance guard (sigma_loc >= 1%, <= 200%)
VARIANCE_FLOOR = _env_float("LOV_VARIANCE_FLOOR", 1e-4)
VARIANCE_CAP = _env_float("LOV_VARIANCE_CAP", 4.0)

# Market data
VEGA_FLOOR = _env_float("LOV_VEGA_FLOOR", 1e-2)
MAX_REL_SPREAD = _env_float("LOV_MAX_REL_SPREAD", 0.25)
CHAIN_COLUMNS = ["expiry_years", "strike", "flag", "exercise", "bid", "ask"]

# Implied volatility solver
IV_LOWER_BOUND = 1e-8
IV_UPPER_BOUND = 5.0
IV_MAX_BRACKET_EXPANSIONS = 10
IV_PRICE_TOLERANCE = 1e-10

# LSMC
LSMC_BANDS = 5
LSMC_RANK_TOLERANCE = 1e-10
# Paths the exercise policy is fitted on: "independent" (fresh seed), "split" (half the pairs)
# or "in_sample" (the pricing paths themselves, high-biased)
LSMC_POLICY_PATHS = os.getenv("LOV_LSMC_POLICY_PATHS", "independent")

# Neural sensitivity (two hidden layers of 64, ReLU / softplus)
NETWORK_LAYER_SIZES = [3, 64, 64, 1]
NETWORK_INIT_SEED = _env_int("LOV_NETWORK_SEED", 7)

# Adam
ADAM_LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Calibration loop
BATCH_SCHEDULE = [(0, 2 ** 8), (1000, 2 ** 12)]  # (first epoch, antithetic pairs)
FINAL_PRICING_PAIRS = 2 ** 12
MAX_EPOCHS = 3000
STOPPING_WINDOW = 50
STOPPING_RANGE_FRACTION = 0.05
CHECKPOINT_EVERY = 100

# Output schema version written into manifests
SCHEMA_VERSION = "1"
