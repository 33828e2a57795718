"""Logging utility for Kalos.

This module provides logging setup with console and file output, a filter
that keeps home-directory paths out of shared logs, and a JSON-lines writer
for per-epoch training metrics.
"""

import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, Optional


class HomePathFilter(logging.Filter):
    """Filter to mask the user's home directory in log messages."""

    def __init__(self, home: Optional[Path] = None):
        super().__init__()
        self.home = str(home if home is not None else Path.home())

    def filter(self, record: logging.LogRecord) -> bool:
        """Replace the home directory prefix with ``~``."""
        if isinstance(record.msg, str) and self.home and self.home != "/":
            record.msg = record.msg.replace(self.home, "~")
        return True


def setup_logger(
    name: str,
    log_file: Optional[Path] = None,
    level: str = "INFO",
    log_format: Optional[str] = None,
) -> logging.Logger:
    """Set up a logger with file and console handlers.

    Args:
        name: Logger name (typically the package name)
        log_file: Optional path to log file
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: Custom log format string

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper()))

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    if log_format is None:
        log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    formatter = logging.Formatter(log_format)

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, level.upper()))
    console_handler.setFormatter(formatter)
    console_handler.addFilter(HomePathFilter())
    logger.addHandler(console_handler)

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(getattr(logging, level.upper()))
        file_handler.setFormatter(formatter)
        file_handler.addFilter(HomePathFilter())
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """Get an existing logger by name.

    Args:
        name: Logger name

    Returns:
        Logger instance
    """
    return logging.getLogger(name)


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if hasattr(value, "item"):
        return _jsonable(value.item())
    return value


def append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    """Append one metrics record to a JSON-lines log.

    Non-finite floats are written as ``null`` so every line stays valid JSON.

    Args:
        path: Log file path (created with parents if missing)
        record: Flat mapping of metric names to values
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    line = json.dumps({key: _jsonable(value) for key, value in record.items()}, sort_keys=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


def read_jsonl(path: Path) -> list:
    """Read every record of a JSON-lines log."""
    if not path.exists():
        return []
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
