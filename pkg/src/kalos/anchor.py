"""Patch masks and anchor mixing.

An anchor takes each 16×16 block from one of two renderings of the same
content under different distortions: ``M ⊙ x1 + (1 - M) ⊙ x2``.
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import PATCH_SIZE
from .errors import ConfigError, ShapeError, UsageError
from .geometry_render import ProjectedImage, save_png

logger = logging.getLogger(__name__)


@dataclass
class PatchMask:
    """Block-structured binary mask; 1-blocks take pixels from the first parent."""

    blocks: np.ndarray
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=bool)
        if self.blocks.ndim != 2:
            raise ShapeError(f"mask blocks must be 2-D, got shape {self.blocks.shape}")

    @property
    def ratio(self) -> float:
        return float(self.blocks.sum()) / self.blocks.size

    @property
    def pixel_shape(self):
        return (self.blocks.shape[0] * self.patch_size, self.blocks.shape[1] * self.patch_size)

    def to_pixels(self) -> np.ndarray:
        """Expand to an H×W boolean mask, constant inside each block."""
        return np.kron(self.blocks, np.ones((self.patch_size, self.patch_size), dtype=bool)).astype(bool)


def sample_mask(height: int, width: int, r_min: float, r_max: float, seed) -> PatchMask:
    """Draw a block count uniformly from the range allowed by [r_min, r_max], then place it.

    Args:
        height: Image height, a multiple of 16
        width: Image width, a multiple of 16
        r_min: Lower bound of the masking ratio
        r_max: Upper bound of the masking ratio
        seed: Seed or numpy Generator

    Raises:
        ShapeError: If height or width is not a multiple of 16
        ConfigError: If the ratio bounds are invalid or admit no block count
    """
    if height % PATCH_SIZE or width % PATCH_SIZE or height <= 0 or width <= 0:
        raise ShapeError(f"image size {height}x{width} is not a positive multiple of {PATCH_SIZE}")
    if not 0.0 <= r_min <= r_max <= 1.0:
        raise ConfigError(f"need 0 <= r_min <= r_max <= 1, got [{r_min}, {r_max}]", field="pretrain.mask_ratio")

    rows, cols = height // PATCH_SIZE, width // PATCH_SIZE
    total = rows * cols
    low, high = math.ceil(r_min * total - 1e-9), math.floor(r_max * total + 1e-9)
    if low > high:
        raise ConfigError(f"no block count of {total} gives a ratio in [{r_min}, {r_max}]",
                          field="pretrain.mask_ratio")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = int(rng.integers(low, high + 1))
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=count, replace=False)] = True
    return PatchMask(flat.reshape(rows, cols))


def masking_ratio(mask: PatchMask) -> float:
    """Fraction of pixels taken from the first parent."""
    return float(mask.to_pixels().mean())


def mix(x1: ProjectedImage, x2: ProjectedImage, mask: PatchMask) -> ProjectedImage:
    """Build an anchor from two distortions of one content.

    Raises:
        ShapeError: If the images or the mask disagree in shape
        UsageError: If the parents come from different contents or share a distortion
    """
    if x1.content_id != x2.content_id:
        raise UsageError(f"anchor parents must share content, got {x1.content_id} and {x2.content_id}")
    if x1.distortion_key == x2.distortion_key:
        raise UsageError(f"anchor parents must differ in distortion, both are {x1.distortion_key}")

    pixels = mix_pixels(x1.pixels, x2.pixels, mask)
    return replace(x1, pixels=pixels, mixed_with=x2.distortion_key)


def mix_pixels(x1: np.ndarray, x2: np.ndarray, mask: PatchMask) -> np.ndarray:
    """Pixel-level mixing without provenance checks (mixing an image with itself is allowed)."""
    if x1.shape != x2.shape or mask.pixel_shape != x1.shape[:2]:
        raise ShapeError(f"cannot mix {x1.shape} with {x2.shape} under mask {mask.pixel_shape}")
    return np.where(mask.to_pixels()[:, :, None], x1, x2)


def dump_anchor(anchor: ProjectedImage, path: Path) -> None:
    """Save an anchor as PNG for inspection."""
    save_png(anchor, path)
    logger.debug(f"Dumped anchor {anchor.source} / {anchor.mixed_with} to {path}")
