"""Utility modules for Kalos."""

from .logger import setup_logger, get_logger, append_jsonl, read_jsonl
from .file_utils import (
    create_output_structure,
    ensure_directory,
    file_sha256,
    get_output_directory,
    list_files,
)

__all__ = [
    "setup_logger",
    "get_logger",
    "append_jsonl",
    "read_jsonl",
    "create_output_structure",
    "ensure_directory",
    "file_sha256",
    "get_output_directory",
    "list_files",
]
