"""Checkpoint container: named numeric arrays plus a JSON metadata header.

Layout (a single ``.npz`` file, loaded with ``allow_pickle=False``):

- ``__metadata__``: UTF-8 JSON bytes stored as a uint8 array, holding
  ``format``, ``version``, ``kind`` and free-form fields such as the
  experiment config, seed, step and epoch counters.
- every other key is a named array, ``<group>/<name>``; module parameters use
  their ``state_dict`` names (``query/projection.weight``), optimizer buffers
  use ``<group>/state/<param index>/<buffer>``.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch
from torch import nn

from .errors import KalosError

logger = logging.getLogger(__name__)

FORMAT_NAME = "kalos-checkpoint"
FORMAT_VERSION = 1
METADATA_KEY = "__metadata__"


class CheckpointError(KalosError):
    """Checkpoint file is missing pieces or has an unsupported version."""


def save_checkpoint(path: Path, arrays: Dict[str, np.ndarray], metadata: Dict[str, Any]) -> Path:
    """Write arrays and metadata to ``path``.

    Args:
        path: Destination ``.npz`` file
        arrays: Named numeric arrays
        metadata: JSON-serialisable metadata

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(metadata, format=FORMAT_NAME, version=FORMAT_VERSION)
    payload = {METADATA_KEY: np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, value in arrays.items():
        if name == METADATA_KEY:
            raise CheckpointError(f"array name {METADATA_KEY!r} is reserved")
        payload[name] = np.asarray(value)
    with open(path, "wb") as f:
        np.savez(f, **payload)
    logger.info(f"Saved checkpoint ({header.get('kind', 'unknown')}) with {len(arrays)} arrays to {path}")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        FileNotFoundError: If the file does not exist
        CheckpointError: If the header is missing or the version unsupported
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if METADATA_KEY not in data.files:
            raise CheckpointError(f"{path} has no metadata header")
        metadata = json.loads(data[METADATA_KEY].tobytes().decode("utf-8"))
        arrays = {name: data[name] for name in data.files if name != METADATA_KEY}
    if metadata.get("format") != FORMAT_NAME or metadata.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint {metadata.get('format')!r} v{metadata.get('version')}"
        )
    return arrays, metadata


def module_arrays(module: nn.Module, prefix: str) -> Dict[str, np.ndarray]:
    """Flatten a module's state dict under ``prefix/``."""
    return {f"{prefix}/{name}": t.detach().cpu().numpy() for name, t in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Dict[str, np.ndarray], prefix: str) -> None:
    """Load ``prefix/``-named arrays into a module, keeping the module's dtype."""
    own = module.state_dict()
    state = {}
    for name, current in own.items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key!r}")
        state[name] = torch.as_tensor(arrays[key], dtype=current.dtype)
    module.load_state_dict(state)


def optimizer_arrays(optimizer: torch.optim.Optimizer, prefix: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """Split an optimizer state dict into tensors (arrays) and JSON metadata."""
    state_dict = optimizer.state_dict()
    arrays: Dict[str, np.ndarray] = {}
    scalars: Dict[str, Dict[str, Any]] = {}
    for index, buffers in state_dict["state"].items():
        for key, value in buffers.items():
            if torch.is_tensor(value):
                arrays[f"{prefix}/state/{index}/{key}"] = value.detach().cpu().numpy()
            else:
                scalars.setdefault(str(index), {})[key] = value
    return arrays, {"param_groups": state_dict["param_groups"], "scalars": scalars}


def restore_optimizer(
    optimizer: torch.optim.Optimizer, arrays: Dict[str, np.ndarray], meta: Dict[str, Any], prefix: str
) -> None:
    """Inverse of :func:`optimizer_arrays`."""
    state: Dict[int, Dict[str, Any]] = {}
    marker = f"{prefix}/state/"
    for name, value in arrays.items():
        if name.startswith(marker):
            index, key = name[len(marker):].split("/", 1)
            state.setdefault(int(index), {})[key] = torch.from_numpy(np.array(value))
    for index, values in meta.get("scalars", {}).items():
        state.setdefault(int(index), {}).update(values)
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
