"""Simple logging utility wrapper with structured key=value fields."""
import logging
from typing import Any, Dict, Optional

from config import LOG_LEVEL

_loggers: Dict[str, logging.Logger] = {}


def _resolve_level(level: Optional[int]) -> int:
    if level is not None:
        return level
    return getattr(logging, str(LOG_LEVEL).upper(), logging.INFO)


def get_logger(name: str, level: Optional[int] = None) -> logging.Logger:
    """
    Get or create a logger instance.

    Args:
        name: Logger name (typically __name__)
        level: Logging level (defaults to LOV_LOG_LEVEL)

    Returns:
        Logger instance
    """
    if name not in _loggers:
        logger = logging.getLogger(name)
        logger.setLevel(_resolve_level(level))

        # Create console handler if not exists
        if not logger.handlers:
            handler = logging.StreamHandler()
            handler.setLevel(logging.DEBUG)
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            handler.setFormatter(formatter)
            logger.addHandler(handler)
        logger.propagate = False

        _loggers[name] = logger

    return _loggers[name]


def set_level(level: int) -> None:
    """Apply a verbosity level to every logger created so far."""
    for logger in _loggers.values():
        logger.setLevel(level)


def format_fields(**fields: Any) -> str:
    """
    Render structured fields as ``key=value`` pairs in insertion order.

    Floats are written with 6 significant digits so log lines stay greppable.

    Args:
        **fields: Field names and values

    Returns:
        Space-separated key=value string
    """
    parts = []
    for key, value in fields.items():
        if isinstance(value, float):
            parts.append(f"{key}={value:.6g}")
        else:
            parts.append(f"{key}={value}")
    return " ".join(parts)
