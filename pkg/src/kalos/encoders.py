"""Image encoders: the pre-trainable quality encoder F and the frozen semantic encoder G.

Both share one backbone family: strided 3×3 convolutions with ReLU, global
average pooling and a linear projection to ``embedding_dim``. The ``linear``
architecture replaces the backbone with a flatten so the projection is the
whole map. Features leaving ``encode_quality`` / ``encode_semantic`` are
L2-normalised.
"""

import logging
import random
from pathlib import Path
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, load_module_arrays
from .config import EncoderConfig
from .errors import NumericError, ShapeError
from .geometry_render import ProjectedImage

logger = logging.getLogger(__name__)

ImageBatch = Union[torch.Tensor, np.ndarray, Sequence[ProjectedImage]]


def resolve_dtype(precision: str) -> torch.dtype:
    """Map ``float32`` / ``float64`` to the torch dtype."""
    return {"float32": torch.float32, "float64": torch.float64}[precision]


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def l2_normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Divide by the Euclidean norm along ``dim``.

    Raises:
        NumericError: If any vector has zero (or non-finite) norm
    """
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if bool((norm == 0).any()) or not bool(torch.isfinite(norm).all()):
        raise NumericError("cannot L2-normalise a zero or non-finite vector")
    return v / norm


def is_normalized(features: torch.Tensor, atol: float = 1e-6) -> bool:
    """True when every row has unit Euclidean norm within ``atol``."""
    norms = torch.linalg.vector_norm(features, dim=-1)
    return bool(torch.all(torch.abs(norms - 1.0) <= atol))


def images_to_tensor(images: ImageBatch, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Convert H×W×C images (or a B×H×W×C array) to a B×C×H×W tensor."""
    if torch.is_tensor(images):
        return images.to(dtype)
    if isinstance(images, np.ndarray):
        array = images if images.ndim == 4 else images[None]
    else:
        array = np.stack([img.pixels for img in images])
    return torch.from_numpy(np.ascontiguousarray(array.transpose(0, 3, 1, 2))).to(dtype)


def _build_backbone(config: EncoderConfig, channels: int) -> Tuple[nn.Module, int]:
    if config.architecture == "linear":
        return nn.Flatten(), -1
    layers = []
    in_channels = channels
    for width in config.widths:
        layers += [nn.Conv2d(in_channels, width, kernel_size=3, stride=2, padding=1), nn.ReLU()]
        in_channels = width
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
    return nn.Sequential(*layers), in_channels


class _Encoder(nn.Module):
    """Backbone + linear projection for a fixed input size."""

    def __init__(self, config: EncoderConfig, input_size: Tuple[int, int, int]):
        super().__init__()
        height, width, channels = input_size
        factor = config.downsampling
        if height % factor or width % factor:
            raise ShapeError(f"input {height}x{width} not divisible by downsampling factor {factor}")
        self.config = config
        self.input_size = (height, width, channels)
        # parameter initialisation depends only on config.seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone, feature_dim = _build_backbone(config, channels)
            if feature_dim < 0:
                feature_dim = height * width * channels
            self.projection = nn.Linear(feature_dim, config.embedding_dim)

    def check_input(self, x: torch.Tensor) -> None:
        height, width, channels = self.input_size
        if x.ndim != 4 or tuple(x.shape[1:]) != (channels, height, width):
            raise ShapeError(f"expected B×{channels}×{height}×{width} input, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.projection(self.backbone(x))


class QualityEncoder(_Encoder):
    """Quality-aware encoder F; fully trainable."""


class SemanticEncoder(_Encoder):
    """Semantic encoder G: frozen backbone, trainable one-layer projection.

    ``config.weights_path`` may point to a checkpoint whose ``backbone/``
    arrays replace the fixed-seed initialisation.
    """

    def __init__(self, config: EncoderConfig, input_size: Tuple[int, int, int]):
        super().__init__(config, input_size)
        if config.weights_path:
            arrays, _ = load_checkpoint(Path(config.weights_path))
            load_module_arrays(self.backbone, arrays, "backbone")
            logger.info(f"Loaded semantic backbone weights from {config.weights_path}")
        self.backbone.requires_grad_(False)

    def trainable_parameters(self) -> Iterable[nn.Parameter]:
        return self.projection.parameters()


def build_quality_encoder(config: EncoderConfig, image_size: Tuple[int, int, int],
                          dtype: torch.dtype = torch.float32) -> QualityEncoder:
    """Quality encoder for H×W×C single-view images."""
    return QualityEncoder(config, image_size).to(dtype)


def build_semantic_encoder(config: EncoderConfig, image_size: Tuple[int, int, int],
                           dtype: torch.dtype = torch.float32) -> SemanticEncoder:
    """Semantic encoder for the 2H×3W stitched image of H×W views."""
    height, width, channels = image_size
    return SemanticEncoder(config, (2 * height, 3 * width, channels)).to(dtype)


def encode_quality(images: ImageBatch, encoder: QualityEncoder) -> torch.Tensor:
    """f = F(x) / ||F(x)|| for a batch of single-view images."""
    dtype = next(encoder.parameters()).dtype
    return l2_normalize(encoder(images_to_tensor(images, dtype)))


def encode_semantic(composed: ImageBatch, encoder: SemanticEncoder) -> torch.Tensor:
    """g for a batch of stitched 2H×3W images."""
    dtype = next(encoder.parameters()).dtype
    return l2_normalize(encoder(images_to_tensor(composed, dtype)))
