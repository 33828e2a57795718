"""Kalos: no-reference point cloud quality assessment.

Kalos pre-trains an image encoder on rendered projections of distorted
point clouds with a patch-mixing contrastive objective, fine-tunes it with
semantic-guided fusion of six axis views, and evaluates it under
content-disjoint protocols.
"""

__version__ = "0.1.0"
__license__ = "MIT"

from .config import ConfigManager, ExperimentConfig
from .errors import KalosError
from .evaluation import EvalResult, evaluate, kfold_split
from .pointcloud_io import DatasetManifest, PointCloud, load_manifest, load_ply, save_ply

__all__ = [
    "__version__",
    "__license__",
    "ConfigManager",
    "ExperimentConfig",
    "KalosError",
    "EvalResult",
    "evaluate",
    "kfold_split",
    "DatasetManifest",
    "PointCloud",
    "load_manifest",
    "load_ply",
    "save_ply",
]
