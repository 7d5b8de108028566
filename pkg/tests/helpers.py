"""Builders shared by several test modules."""
from pathlib import Path
from typing import Iterable, Sequence

from engine.schemas import SimConfig

CHAIN_HEADER = "expiry_years,strike,flag,exercise,bid,ask"


def small_sim(paths: int = 256, steps: int = 20, horizon: float = 0.25, seed: int = 11, **kwargs) -> SimConfig:
    return SimConfig(horizon=horizon, steps=steps, paths=paths, seed=seed, **kwargs)


def write_chain_file(path: Path, rows: Iterable[Sequence]) -> Path:
    lines = [CHAIN_HEADER] + [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
