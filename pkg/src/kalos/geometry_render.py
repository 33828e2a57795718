"""Normalisation, rotation and z-buffered point splatting.

The camera is a pinhole on the +z axis at ``camera_distance`` looking at the
origin with +y up. Other viewpoints are produced by rotating the cloud into
that camera frame, so every view goes through the same rasteriser.
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from .config import RenderConfig
from .errors import ShapeError
from .pointcloud_io import PointCloud

logger = logging.getLogger(__name__)

# Fixed viewpoint order for the six axis cameras; view_id = index + 1.
# Stitch layout: +x, -x, +y on the top row; -y, +z, -z on the bottom row.
VIEW_ORDER = ("+x", "-x", "+y", "-y", "+z", "-z")

# (direction towards the camera, image up) per viewpoint
_VIEW_FRAMES = {
    "+x": ((1, 0, 0), (0, 1, 0)),
    "-x": ((-1, 0, 0), (0, 1, 0)),
    "+y": ((0, 1, 0), (0, 0, -1)),
    "-y": ((0, -1, 0), (0, 0, 1)),
    "+z": ((0, 0, 1), (0, 1, 0)),
    "-z": ((0, 0, -1), (0, 1, 0)),
}


@dataclass
class ProjectedImage:
    """An H×W×C rendered view with values in [0, 1]."""

    pixels: np.ndarray
    view_id: int = 0
    content_id: Optional[int] = None
    distortion_id: Optional[int] = None
    level: Optional[int] = None
    mixed_with: Optional[Tuple[int, int]] = None  # second parent's (distortion_id, level)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.pixels.shape)

    @property
    def source(self) -> Tuple[Optional[int], Optional[int]]:
        return (self.content_id, self.distortion_id)

    @property
    def distortion_key(self) -> Tuple[Optional[int], Optional[int]]:
        return (self.distortion_id, self.level)


def normalize_to_unit_ball(cloud: PointCloud) -> PointCloud:
    """Translate the centroid to the origin and scale the farthest point to radius 1.

    A single point, or a cloud of coincident points, maps to the origin.

    Raises:
        EmptyCloudError: If the cloud has no points
    """
    cloud.require_points()
    centered = cloud.positions - cloud.positions.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    scale = radius if radius > 0.0 else 1.0
    return PointCloud(centered / scale, cloud.colors.copy())


def random_rotation(seed: int) -> Rotation:
    """Uniformly distributed rotation (normalised Gaussian quaternion), deterministic per seed."""
    return Rotation.random(random_state=seed)


def rotate(cloud: PointCloud, rotation: Union[Rotation, np.ndarray]) -> PointCloud:
    """Rotate positions about the origin; colours are untouched."""
    matrix = rotation.as_matrix() if isinstance(rotation, Rotation) else np.asarray(rotation, dtype=np.float64)
    if matrix.shape != (3, 3):
        raise ShapeError(f"rotation matrix must be 3x3, got {matrix.shape}")
    return PointCloud(cloud.positions @ matrix.T, cloud.colors.copy())


@lru_cache(maxsize=None)
def view_rotation(view_id: int) -> np.ndarray:
    """World-to-camera rotation placing view ``view_id`` (1..6) on the +z camera axis."""
    if not 1 <= view_id <= len(VIEW_ORDER):
        raise ShapeError(f"view_id must lie in [1, {len(VIEW_ORDER)}], got {view_id}")
    back, up = (np.asarray(v, dtype=np.float64) for v in _VIEW_FRAMES[VIEW_ORDER[view_id - 1]])
    right = np.cross(up, back)
    matrix = np.stack([right, up, back])
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=16)
def _disc_offsets(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    inside = dx ** 2 + dy ** 2 <= radius ** 2
    return np.stack([dy[inside], dx[inside]], axis=1)


def focal_length(config: RenderConfig) -> float:
    """Focal length in pixels for the configured field of view."""
    half_extent = min(config.image_height, config.image_width) / 2.0
    return half_extent / np.tan(np.radians(config.effective_fov()) / 2.0)


def project(positions: np.ndarray, config: RenderConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection of camera-frame positions; returns (rows, cols, depth)."""
    depth = config.camera_distance - positions[:, 2]
    f = focal_length(config)
    u = config.image_width / 2.0 + f * positions[:, 0] / depth
    v = config.image_height / 2.0 - f * positions[:, 1] / depth
    return np.floor(v).astype(np.int64), np.floor(u).astype(np.int64), depth


def render(cloud: PointCloud, config: RenderConfig, view_id: int = 0) -> ProjectedImage:
    """Rasterise a unit-ball cloud with z-buffered disc splats.

    Each point covers the integer-pixel disc of ``splat_radius`` around its
    projection; per pixel the nearest point wins, ties broken by colour so the
    image does not depend on point order. Uncovered pixels keep the
    background colour.

    Raises:
        EmptyCloudError: If the cloud has no points
    """
    cloud.require_points()
    h, w = config.image_height, config.image_width
    rows, cols, depth = project(cloud.positions, config)
    offsets = _disc_offsets(config.splat_radius)

    pr = (rows[:, None] + offsets[None, :, 0]).ravel()
    pc = (cols[:, None] + offsets[None, :, 1]).ravel()
    point_index = np.repeat(np.arange(cloud.point_count), len(offsets))
    valid = (pr >= 0) & (pr < h) & (pc >= 0) & (pc < w) & (depth[point_index] > 0)
    pixel = pr[valid] * w + pc[valid]
    point_index = point_index[valid]

    image = np.empty((h * w, config.channels), dtype=np.float32)
    image[:] = np.asarray(config.background_color, dtype=np.float32)
    if len(pixel):
        colors = cloud.colors[point_index]
        order = np.lexsort((colors[:, 2], colors[:, 1], colors[:, 0], depth[point_index], pixel))
        pixel, colors = pixel[order], colors[order]
        first = np.concatenate([[True], pixel[1:] != pixel[:-1]])
        image[pixel[first]] = colors[first]

    return ProjectedImage(np.clip(image.reshape(h, w, config.channels), 0.0, 1.0), view_id=view_id)


def render_rotated(
    cloud: PointCloud, rotation: Union[Rotation, np.ndarray], config: RenderConfig, view_id: int = 0
) -> ProjectedImage:
    """Rotate, normalise to the unit ball, then render from the +z camera."""
    return render(normalize_to_unit_ball(rotate(cloud, rotation)), config, view_id=view_id)


def render_view(cloud: PointCloud, view_id: int, config: RenderConfig) -> ProjectedImage:
    """Render one axis view (1..6) of the normalised cloud."""
    return render(rotate(normalize_to_unit_ball(cloud), view_rotation(view_id)), config, view_id=view_id)


def render_six_views(cloud: PointCloud, config: RenderConfig) -> List[ProjectedImage]:
    """Render the normalised cloud from cameras on +x, -x, +y, -y, +z, -z (view_id 1..6)."""
    normalized = normalize_to_unit_ball(cloud)
    return [
        render(rotate(normalized, view_rotation(view_id)), config, view_id=view_id)
        for view_id in range(1, len(VIEW_ORDER) + 1)
    ]


def stitch_views(views: Sequence[ProjectedImage]) -> ProjectedImage:
    """Compose six equally sized views into a 2H×3W image in view_id order.

    Raises:
        ShapeError: If there are not exactly six views of identical shape
    """
    if len(views) != len(VIEW_ORDER):
        raise ShapeError(f"expected {len(VIEW_ORDER)} views, got {len(views)}")
    shapes = {v.shape for v in views}
    if len(shapes) != 1:
        raise ShapeError(f"views differ in shape: {sorted(shapes)}")
    ordered = sorted(views, key=lambda v: v.view_id)
    top = np.concatenate([v.pixels for v in ordered[:3]], axis=1)
    bottom = np.concatenate([v.pixels for v in ordered[3:]], axis=1)
    return replace(ordered[0], pixels=np.concatenate([top, bottom], axis=0), view_id=0)


def crop_view(composed: ProjectedImage, view_id: int, height: int, width: int) -> np.ndarray:
    """Cut view ``view_id`` back out of a stitched image."""
    row, col = divmod(view_id - 1, 3)
    return composed.pixels[row * height:(row + 1) * height, col * width:(col + 1) * width]


def save_png(image: ProjectedImage, path: Path) -> None:
    """Write an image as 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.round(image.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)
    logger.debug(f"Saved image to {path}")


def load_png(path: Path) -> ProjectedImage:
    """Read an 8-bit RGB PNG back into [0, 1] pixels."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return ProjectedImage(data)
