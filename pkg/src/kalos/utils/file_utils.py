"""File system utilities for Kalos.

This module provides the output directory layout shared by every command,
plus small helpers for listing, sizing and hashing files.
"""

import hashlib
import os
from pathlib import Path
from typing import List, Optional
import logging

logger = logging.getLogger(__name__)

# Sub-directories created under every output directory
OUTPUT_SUBDIRS = [
    "cache/renders",
    "checkpoints",
    "logs",
    "reports",
    "plots",
    "anchors",
]


def get_output_directory(base_path: Optional[Path] = None) -> Path:
    """Get the output directory path.

    Args:
        base_path: Explicit output directory. Defaults to ``./kalos-out``.

    Returns:
        Path to the output directory
    """
    if base_path is None:
        return Path.cwd() / "kalos-out"
    return Path(base_path)


def ensure_directory(path: Path, mode: int = 0o755) -> None:
    """Ensure a directory exists with proper permissions.

    Args:
        path: Directory path to create
        mode: Unix file permissions
    """
    path.mkdir(parents=True, exist_ok=True, mode=mode)
    os.chmod(path, mode)
    logger.debug(f"Created directory: {path} with mode {oct(mode)}")


def create_output_structure(base_path: Optional[Path] = None) -> Path:
    """Create the complete output directory structure.

    Args:
        base_path: Output directory. Defaults to ``./kalos-out``.

    Returns:
        Path to the created output directory

    Raises:
        OSError: If directory creation fails
    """
    out_dir = get_output_directory(base_path)
    for sub in [""] + OUTPUT_SUBDIRS:
        ensure_directory(out_dir / sub if sub else out_dir)

    logger.info(f"Created output directory structure at {out_dir}")
    return out_dir


def list_files(directory: Path, pattern: str = "*") -> List[Path]:
    """List files in a directory matching a pattern.

    Args:
        directory: Directory to search
        pattern: Glob pattern (default: "*" for all files)

    Returns:
        Sorted list of matching file paths
    """
    if not directory.exists():
        return []
    return sorted(p for p in directory.glob(pattern) if p.is_file())


def get_directory_size(directory: Path) -> int:
    """Calculate total size of directory in bytes.

    Args:
        directory: Directory path

    Returns:
        Total size in bytes
    """
    total_size = 0
    if directory.exists():
        for file_path in directory.rglob("*"):
            if file_path.is_file():
                total_size += file_path.stat().st_size
    return total_size


def file_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    """Return the hex SHA-256 digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()
