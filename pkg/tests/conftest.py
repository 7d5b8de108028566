"""Shared fixtures: environments, surfaces, partitions and chain files."""
from datetime import date
from pathlib import Path

import numpy as np
import pytest

from engine.lov_model import LovModel
from engine.occupation import build_partition
from engine.schemas import MarketEnvironment
from services.localvol import LocalVolSurface, flat_surface
from tests.helpers import write_chain_file


@pytest.fixture
def env() -> MarketEnvironment:
    return MarketEnvironment(spot=100.0, rate=0.0, dividend_yield=0.0, valuation_date=date(2025, 1, 2))


@pytest.fixture
def env_rates() -> MarketEnvironment:
    return MarketEnvironment(spot=100.0, rate=0.05, dividend_yield=0.0, valuation_date=date(2025, 1, 2))


@pytest.fixture
def flat_lv() -> LocalVolSurface:
    return flat_surface(0.2, 2.0, 100.0)


@pytest.fixture
def skew_lv() -> LocalVolSurface:
    strikes = np.array([40.0, 70.0, 90.0, 100.0, 110.0, 130.0, 200.0])
    times = np.array([0.0, 0.25, 0.5, 1.0, 2.0])
    smile = np.array([0.34, 0.28, 0.23, 0.21, 0.19, 0.17, 0.16])
    values = np.vstack([smile * (1.0 - 0.02 * k) for k in range(times.size)])
    return LocalVolSurface(time_grid=times, strike_grid=strikes, values=values)


@pytest.fixture
def partition():
    return build_partition(100.0, 0.2, 1.0, 21)


@pytest.fixture
def lv_model(flat_lv, partition) -> LovModel:
    return LovModel(surface=flat_lv, partition=partition, kappa=12.0)


@pytest.fixture
def chain_file(tmp_path: Path) -> Path:
    rows = [
        (0.5, 100, "P", "A", 5.0, 5.4),
        (0.25, 110, "C", "E", 1.0, 1.2),
        (0.25, 90, "P", "A", 0.9, 1.1),
        (0.25, 100, "C", "E", 3.9, 4.1),
        (0.5, 100, "C", "E", 5.5, 5.8),
    ]
    return write_chain_file(tmp_path / "chain.csv", rows)
