from __future__ import annotations

import logging
import sys
from pathlib import Path

import pytest

PROJECT_ROOT = Path(__file__).resolve().parent
SRC_PATH = PROJECT_ROOT.parent / "src"

if str(SRC_PATH) not in sys.path:
    sys.path.insert(0, str(SRC_PATH))

import numpy as np

from kalos.config import ExperimentConfig, RenderConfig
from kalos.pointcloud_io import PointCloud, synth_reference, synthesize_dataset


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption("--run-slow", action="store_true", default=False, help="run acceptance-scale smoke tests")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _reset_cli_logger():
    """CLI commands attach handlers bound to the runner's streams; drop them after each test."""
    yield
    logger = logging.getLogger("kalos")
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)


@pytest.fixture
def tiny_cloud() -> PointCloud:
    """Eight cube corners with distinct colours."""
    corners = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)])
    colors = np.linspace(0.0, 1.0, 24).reshape(8, 3)
    return PointCloud(corners, colors)


@pytest.fixture
def small_render() -> RenderConfig:
    return RenderConfig(image_height=32, image_width=32, splat_radius=1)


def _tiny_config(tmp_path: Path, **sections) -> ExperimentConfig:
    """Float64, 32×32 images (four mask blocks), linear encoders: fast enough for unit tests."""
    data = {
        "paths": {"output_dir": str(tmp_path / "out")},
        "render": {"image_height": 32, "image_width": 32},
        "distortion": {"kinds": ["gaussian_geometry_noise", "color_noise", "downsample"], "levels": 2},
        "encoder": {"architecture": "linear", "embedding_dim": 8, "seed": 0},
        "semantic": {"architecture": "linear", "embedding_dim": 8, "seed": 1},
        "pretrain": {"batch_size": 4, "queue_capacity": 16, "epochs": 2, "steps_per_epoch": 2},
        "fusion": {"num_heads": 2},
        "finetune": {"batch_size": 4, "epochs": 2, "head_hidden_dim": 8},
        "runtime": {"precision": "float64"},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    config = ExperimentConfig.from_dict(data)
    config.validate()
    return config


@pytest.fixture
def make_config(tmp_path: Path):
    """Factory for tiny configurations; keyword arguments update sections."""
    return lambda **sections: _tiny_config(tmp_path, **sections)


@pytest.fixture
def tiny_experiment(tmp_path: Path) -> ExperimentConfig:
    return _tiny_config(tmp_path)


@pytest.fixture
def synthetic_dataset(tmp_path: Path, tiny_experiment: ExperimentConfig):
    """Four procedural contents × 3 kinds × 2 levels with pseudo-MOS."""
    references = [(c, synth_reference(c, n_points=300, seed=0)) for c in range(4)]
    return synthesize_dataset(references, tmp_path / "dataset", tiny_experiment.distortion, seed=0, with_mos=True)
