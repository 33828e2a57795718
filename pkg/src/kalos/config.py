"""Configuration management for Kalos.

This module handles loading, validating, overriding and saving the
experiment configuration kept in a single YAML file. Every default equals
the published training setup where one exists; desk-scale values are noted.
"""

import copy
import hashlib
import math
import yaml
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional
from dataclasses import asdict, dataclass, field, fields
import logging

from .errors import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = "1"

# Anchor patches are square blocks of this many pixels
PATCH_SIZE = 16

DISTORTION_KINDS = ("gaussian_geometry_noise", "color_noise", "downsample", "quantize")
MAX_LEVEL = 7
PRECISIONS = ("float32", "float64")
FUSION_MODES = ("semantic", "max", "mean")
ARCHITECTURES = ("conv", "linear")
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


@dataclass
class RenderConfig:
    """Configuration for point cloud projection."""

    image_height: int = 512
    image_width: int = 512
    channels: int = 3
    camera_distance: float = 3.0
    field_of_view: Optional[float] = None  # degrees; None fits the unit ball to ~90% of the frame
    splat_radius: int = 1
    background_color: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])

    def effective_fov(self, fill: float = 0.9) -> float:
        """Field of view in degrees, derived from the camera distance when unset."""
        if self.field_of_view is not None:
            return float(self.field_of_view)
        # silhouette half-angle of the unit ball seen from camera_distance
        half = math.asin(1.0 / self.camera_distance)
        return math.degrees(2.0 * math.atan(math.tan(half) / fill))

    def validate(self, prefix: str = "render") -> List[str]:
        errors = []
        for name in ("image_height", "image_width"):
            value = getattr(self, name)
            if value <= 0 or value % PATCH_SIZE:
                errors.append(f"{prefix}.{name}: must be a positive multiple of {PATCH_SIZE}")
        if self.channels != 3:
            errors.append(f"{prefix}.channels: only 3 (RGB) is supported")
        if self.camera_distance <= 1.0:
            errors.append(f"{prefix}.camera_distance: must be > 1 (camera outside the unit ball)")
        if self.field_of_view is not None and not 0.0 < self.field_of_view < 180.0:
            errors.append(f"{prefix}.field_of_view: must lie in (0, 180) degrees")
        if self.splat_radius < 0:
            errors.append(f"{prefix}.splat_radius: must be >= 0")
        if len(self.background_color) != 3 or any(not 0.0 <= c <= 1.0 for c in self.background_color):
            errors.append(f"{prefix}.background_color: must be three values in [0, 1]")
        return errors


@dataclass
class DistortionConfig:
    """Severity schedules of the synthetic distortion kinds."""

    kinds: List[str] = field(default_factory=lambda: list(DISTORTION_KINDS))
    levels: int = MAX_LEVEL
    noise_sigma_base: float = 0.002
    noise_sigma_ratio: float = 1.6
    color_sigma_base: float = 0.02
    color_sigma_ratio: float = 1.5
    keep_fraction_max: float = 0.9
    keep_fraction_min: float = 0.1
    quantize_step_base: float = 0.002

    def noise_sigma(self, level: int) -> float:
        return self.noise_sigma_base * self.noise_sigma_ratio ** (level - 1)

    def color_sigma(self, level: int) -> float:
        return self.color_sigma_base * self.color_sigma_ratio ** (level - 1)

    def keep_fraction(self, level: int) -> float:
        span = self.keep_fraction_max - self.keep_fraction_min
        return self.keep_fraction_max - span * (level - 1) / (MAX_LEVEL - 1)

    def quantize_step(self, level: int) -> float:
        return self.quantize_step_base * 2.0 ** (level - 1)

    def validate(self, prefix: str = "distortion") -> List[str]:
        errors = []
        unknown = [k for k in self.kinds if k not in DISTORTION_KINDS]
        if unknown or not self.kinds:
            errors.append(f"{prefix}.kinds: must be a non-empty subset of {list(DISTORTION_KINDS)}")
        if not 1 <= self.levels <= MAX_LEVEL:
            errors.append(f"{prefix}.levels: must lie in [1, {MAX_LEVEL}]")
        for name in ("noise_sigma_base", "color_sigma_base", "quantize_step_base"):
            if getattr(self, name) <= 0:
                errors.append(f"{prefix}.{name}: must be > 0")
        for name in ("noise_sigma_ratio", "color_sigma_ratio"):
            if getattr(self, name) <= 1.0:
                errors.append(f"{prefix}.{name}: must be > 1 so severity grows with level")
        if not 0.1 <= self.keep_fraction_min < self.keep_fraction_max <= 1.0:
            errors.append(f"{prefix}.keep_fraction_min/max: need 0.1 <= min < max <= 1")
        return errors


@dataclass
class EncoderConfig:
    """Configuration for an image encoder (quality encoder F or semantic encoder G)."""

    architecture: str = "conv"
    widths: List[int] = field(default_factory=lambda: [16, 32, 64])
    embedding_dim: int = 128  # 1024 at full scale
    seed: int = 0
    weights_path: Optional[str] = None

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.widths) if self.architecture == "conv" else 1

    def validate(self, prefix: str = "encoder") -> List[str]:
        errors = []
        if self.architecture not in ARCHITECTURES:
            errors.append(f"{prefix}.architecture: must be one of {list(ARCHITECTURES)}")
        if self.embedding_dim <= 0:
            errors.append(f"{prefix}.embedding_dim: must be > 0")
        if self.architecture == "conv" and (not self.widths or any(w <= 0 for w in self.widths)):
            errors.append(f"{prefix}.widths: must be a non-empty list of positive channel counts")
        return errors


@dataclass
class PretrainConfig:
    """Configuration for contrastive pre-training."""

    lambda_weight: float = 0.3
    temperature: float = 0.2
    momentum: float = 0.999
    queue_capacity: int = 4096
    queue_init: str = "empty"
    rotations_per_cloud: int = 6
    batch_size: int = 32  # 128 at full scale
    epochs: int = 200
    steps_per_epoch: Optional[int] = None
    learning_rate: float = 0.005
    lr_decay: float = 0.2
    lr_step: int = 10
    optimizer_momentum: float = 0.95
    weight_decay: float = 1e-4
    mask_ratio_min: float = 0.25
    mask_ratio_max: float = 0.75
    include_positive_in_denominator: bool = False
    max_distortion_negatives: Optional[int] = None

    def validate(self, prefix: str = "pretrain") -> List[str]:
        errors = []
        if not 0.0 <= self.lambda_weight <= 1.0:
            errors.append(f"{prefix}.lambda_weight: must lie in [0, 1]")
        if self.temperature <= 0:
            errors.append(f"{prefix}.temperature: must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            errors.append(f"{prefix}.momentum: must lie in [0, 1)")
        if self.batch_size < 1:
            errors.append(f"{prefix}.batch_size: must be >= 1")
        elif self.queue_capacity < 1 or self.queue_capacity % self.batch_size:
            errors.append(f"{prefix}.queue_capacity: must be a positive multiple of batch_size")
        if self.queue_init not in ("random", "empty"):
            errors.append(f"{prefix}.queue_init: must be 'random' or 'empty'")
        if self.rotations_per_cloud < 1:
            errors.append(f"{prefix}.rotations_per_cloud: must be >= 1")
        if self.epochs < 0:
            errors.append(f"{prefix}.epochs: must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            errors.append(f"{prefix}.steps_per_epoch: must be >= 1 when set")
        if self.learning_rate <= 0:
            errors.append(f"{prefix}.learning_rate: must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            errors.append(f"{prefix}.lr_decay: must lie in (0, 1]")
        if self.lr_step < 1:
            errors.append(f"{prefix}.lr_step: must be >= 1")
        if not 0.0 <= self.optimizer_momentum < 1.0:
            errors.append(f"{prefix}.optimizer_momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            errors.append(f"{prefix}.weight_decay: must be >= 0")
        if not 0.0 <= self.mask_ratio_min <= self.mask_ratio_max <= 1.0:
            errors.append(f"{prefix}.mask_ratio_min/max: need 0 <= min <= max <= 1")
        if self.max_distortion_negatives is not None and self.max_distortion_negatives < 1:
            errors.append(f"{prefix}.max_distortion_negatives: must be >= 1 when set")
        return errors


@dataclass
class FusionConfig:
    """Configuration for semantic-guided multi-view fusion."""

    num_heads: int = 8
    d_f: Optional[float] = None  # None uses embedding_dim (1024 at full scale)
    per_head_scale: bool = False
    mode: str = "semantic"

    def validate(self, embedding_dim: int, prefix: str = "fusion") -> List[str]:
        errors = []
        if self.num_heads < 1 or embedding_dim % self.num_heads:
            errors.append(f"{prefix}.num_heads: must divide encoder.embedding_dim ({embedding_dim})")
        if self.d_f is not None and self.d_f <= 0:
            errors.append(f"{prefix}.d_f: must be > 0 when set")
        if self.mode not in FUSION_MODES:
            errors.append(f"{prefix}.mode: must be one of {list(FUSION_MODES)}")
        return errors


@dataclass
class FinetuneConfig:
    """Configuration for supervised fine-tuning."""

    alpha: float = 0.5
    batch_size: int = 16
    epochs: int = 150
    learning_rate: float = 0.003
    lr_decay: float = 0.9
    lr_step: int = 5
    weight_decay: float = 1e-4
    head_hidden_dim: int = 64  # 512 at full scale
    use_pretrained: bool = True

    def validate(self, prefix: str = "finetune") -> List[str]:
        errors = []
        if not 0.0 <= self.alpha <= 1.0:
            errors.append(f"{prefix}.alpha: must lie in [0, 1]")
        if self.batch_size < 2:
            errors.append(f"{prefix}.batch_size: must be >= 2 (rank loss compares pairs)")
        if self.epochs < 0:
            errors.append(f"{prefix}.epochs: must be >= 0")
        if self.learning_rate <= 0:
            errors.append(f"{prefix}.learning_rate: must be > 0")
        if not 0.0 < self.lr_decay <= 1.0:
            errors.append(f"{prefix}.lr_decay: must lie in (0, 1]")
        if self.lr_step < 1:
            errors.append(f"{prefix}.lr_step: must be >= 1")
        if self.weight_decay < 0:
            errors.append(f"{prefix}.weight_decay: must be >= 0")
        if self.head_hidden_dim < 1:
            errors.append(f"{prefix}.head_hidden_dim: must be >= 1")
        return errors


@dataclass
class EvalConfig:
    """Configuration for the evaluation protocol."""

    folds: int = 5
    train_ratio: int = 7
    test_ratio: int = 2
    holdout_ratios: List[int] = field(default_factory=lambda: [8, 1, 1])
    oracle: bool = False
    scatter_plot: bool = True

    def validate(self, prefix: str = "evaluation") -> List[str]:
        errors = []
        if self.folds < 2:
            errors.append(f"{prefix}.folds: must be >= 2")
        if self.train_ratio < 1 or self.test_ratio < 1:
            errors.append(f"{prefix}.train_ratio/test_ratio: must be >= 1")
        if len(self.holdout_ratios) != 3 or any(r < 1 for r in self.holdout_ratios):
            errors.append(f"{prefix}.holdout_ratios: must be three positive integers")
        return errors


@dataclass
class PathsConfig:
    """File-system locations used by the commands."""

    pretrain_manifest: Optional[str] = None
    finetune_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    cache_dir: Optional[str] = None  # defaults to <output_dir>/cache/renders
    output_dir: str = "kalos-out"

    def resolved_cache_dir(self) -> Path:
        if self.cache_dir:
            return Path(self.cache_dir)
        return Path(self.output_dir) / "cache" / "renders"


@dataclass
class RuntimeConfig:
    """Numeric precision and parallelism."""

    precision: str = "float32"
    workers: Optional[int] = None  # None uses the physical core count
    deterministic: bool = True

    def validate(self, prefix: str = "runtime") -> List[str]:
        errors = []
        if self.precision not in PRECISIONS:
            errors.append(f"{prefix}.precision: must be one of {list(PRECISIONS)}")
        if self.workers is not None and self.workers < 1:
            errors.append(f"{prefix}.workers: must be >= 1 when set")
        return errors


@dataclass
class LoggingConfig:
    """Configuration for logging."""

    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    def validate(self, prefix: str = "logging") -> List[str]:
        if self.level.upper() not in LOG_LEVELS:
            return [f"{prefix}.level: must be one of {list(LOG_LEVELS)}"]
        return []


SECTIONS = {
    "paths": PathsConfig,
    "render": RenderConfig,
    "distortion": DistortionConfig,
    "encoder": EncoderConfig,
    "semantic": EncoderConfig,
    "pretrain": PretrainConfig,
    "fusion": FusionConfig,
    "finetune": FinetuneConfig,
    "evaluation": EvalConfig,
    "runtime": RuntimeConfig,
    "logging": LoggingConfig,
}


@dataclass
class ExperimentConfig:
    """Main configuration class for Kalos."""

    version: str = CONFIG_VERSION
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    distortion: DistortionConfig = field(default_factory=DistortionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    semantic: EncoderConfig = field(default_factory=lambda: EncoderConfig(seed=1))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        """Create ExperimentConfig instance from dictionary.

        Args:
            data: Configuration dictionary (missing keys take defaults)

        Returns:
            ExperimentConfig instance

        Raises:
            ConfigError: If a key is unknown or a section is malformed
        """
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError("unknown configuration key", field=key)

        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            if key in SECTIONS:
                kwargs[key] = _build_section(SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        config = cls(**kwargs)
        config.version = str(config.version)
        return config

    def to_dict(self) -> Dict[str, Any]:
        """Convert ExperimentConfig instance to dictionary.

        Returns:
            Configuration dictionary
        """
        return asdict(self)

    def validate(self) -> None:
        """Check every section.

        Raises:
            ConfigError: Listing every invalid field, one per line
        """
        errors: List[str] = []
        if str(self.version) != CONFIG_VERSION:
            errors.append(f"version: unsupported config version {self.version!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            errors.append("seed: must be a non-negative integer")
        errors += self.render.validate()
        errors += self.distortion.validate()
        errors += self.encoder.validate("encoder")
        errors += self.semantic.validate("semantic")
        errors += self.pretrain.validate()
        errors += self.fusion.validate(self.encoder.embedding_dim)
        errors += self.finetune.validate()
        errors += self.evaluation.validate()
        errors += self.runtime.validate()
        errors += self.logging.validate()
        if self.semantic.embedding_dim != self.encoder.embedding_dim:
            errors.append("semantic.embedding_dim: must equal encoder.embedding_dim")
        for name, enc in (("encoder", self.encoder), ("semantic", self.semantic)):
            factor = enc.downsampling
            if self.render.image_height % factor or self.render.image_width % factor:
                errors.append(
                    f"{name}.widths: image size must be divisible by the downsampling factor {factor}"
                )
        if errors:
            raise ConfigError("\n".join(errors))

    def require_paths(self, names: Iterable[str]) -> None:
        """Check that the named manifest paths are set and exist.

        Raises:
            ConfigError: If a path is unset or missing on disk
        """
        for name in names:
            value = getattr(self.paths, name)
            if not value:
                raise ConfigError("path is required for this command", field=f"paths.{name}")
            if not Path(value).exists():
                raise ConfigError(f"path does not exist: {value}", field=f"paths.{name}")


def _build_section(section_cls: type, value: Any, prefix: str) -> Any:
    if value is None:
        return section_cls()
    if not isinstance(value, dict):
        raise ConfigError("section must be a mapping", field=prefix)
    known = {f.name for f in fields(section_cls)}
    for key in value:
        if key not in known:
            raise ConfigError("unknown configuration key", field=f"{prefix}.{key}")
    return section_cls(**value)


def apply_overrides(config: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides to a copy of the configuration.

    Values are parsed as YAML scalars, so ``1e-3``, ``true`` and ``null``
    work as expected.

    Args:
        config: Base configuration
        overrides: Strings of the form ``dotted.key=value``

    Returns:
        New ExperimentConfig with the overrides applied

    Raises:
        ConfigError: If an override is malformed or names an unknown key
    """
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError("unknown configuration key", field=key)
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError("unknown configuration key", field=key)
        node[parts[-1]] = yaml.safe_load(raw) if raw.strip() else None
    return ExperimentConfig.from_dict(data)


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the canonical YAML dump; identifies a run's configuration."""
    canonical = yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ConfigManager:
    """Manager for loading and saving configuration."""

    def __init__(self, config_path: Path):
        """Initialize ConfigManager.

        Args:
            config_path: Path to the YAML configuration file
        """
        self.config_path = Path(config_path)
        self._config: Optional[ExperimentConfig] = None

    def load(self) -> ExperimentConfig:
        """Load configuration from file.

        Returns:
            ExperimentConfig instance

        Raises:
            FileNotFoundError: If config file doesn't exist
            ConfigError: If config file is not valid YAML or has unknown keys
        """
        if not self.config_path.exists():
            raise FileNotFoundError(f"Config file not found: {self.config_path}")

        with open(self.config_path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f)
            except yaml.YAMLError as e:
                raise ConfigError(f"invalid YAML in {self.config_path}: {e}") from e

        self._config = ExperimentConfig.from_dict(data)
        logger.info(f"Loaded configuration from {self.config_path}")
        return self._config

    def save(self, config: ExperimentConfig) -> None:
        """Save configuration to file.

        Args:
            config: ExperimentConfig instance to save
        """
        self.config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(self.config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(config.to_dict(), f, default_flow_style=False, sort_keys=False)

        self._config = config
        logger.info(f"Saved configuration to {self.config_path}")

    def get(self) -> ExperimentConfig:
        """Get current configuration.

        Raises:
            RuntimeError: If configuration hasn't been loaded
        """
        if self._config is None:
            raise RuntimeError("Configuration not loaded. Call load() first.")
        return self._config

    def reload(self) -> ExperimentConfig:
        """Reload configuration from file."""
        return self.load()


def clone(config: ExperimentConfig) -> ExperimentConfig:
    """Deep copy of a configuration."""
    return copy.deepcopy(config)
