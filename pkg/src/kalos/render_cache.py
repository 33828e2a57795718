"""Content-addressed cache of rendered views.

Keys hash the cloud bytes, the rotation (or axis view) and the render
configuration, so a hit is bit-identical to a fresh render. Entries live in
memory and, when a cache directory is configured, as ``<key>.npy`` files.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import psutil

from .config import RenderConfig
from .geometry_render import ProjectedImage, VIEW_ORDER, random_rotation, render_rotated, render_view
from .pointcloud_io import DatasetManifest, ManifestEntry, PointCloud, load_ply

logger = logging.getLogger(__name__)


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def default_workers() -> int:
    """Physical core count (logical count when psutil cannot tell)."""
    return psutil.cpu_count(logical=False) or psutil.cpu_count() or 1


def _render_config_digest(config: RenderConfig) -> str:
    return hashlib.sha256(json.dumps(asdict(config), sort_keys=True).encode("utf-8")).hexdigest()


class RenderCache:
    """Renders pre-training rotations and fine-tuning axis views on demand."""

    def __init__(
        self,
        config: RenderConfig,
        cache_dir: Optional[Path] = None,
        seed: int = 0,
        rotations_per_cloud: int = 6,
    ):
        """Initialize RenderCache.

        Args:
            config: Render configuration shared by every cached image
            cache_dir: Optional directory for ``.npy`` entries
            seed: Experiment seed; fixes the per-content rotations
            rotations_per_cloud: Number of random rotations per content
        """
        self.config = config
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.seed = seed
        self.rotations_per_cloud = rotations_per_cloud
        self._config_digest = _render_config_digest(config)
        self._clouds: Dict[Path, Tuple[PointCloud, str]] = {}
        self._images: Dict[str, np.ndarray] = {}
        self.hits = 0
        self.misses = 0
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def rotation_matrix(self, content_id: int, rotation_index: int) -> np.ndarray:
        """The ``rotation_index``-th random rotation of a content, shared by all its distortions."""
        return random_rotation(derive_seed(self.seed, content_id, rotation_index)).as_matrix()

    def _cloud(self, path: Path) -> Tuple[PointCloud, str]:
        path = Path(path)
        if path not in self._clouds:
            cloud = load_ply(path)
            self._clouds[path] = (cloud, hashlib.sha256(cloud.to_bytes()).hexdigest())
        return self._clouds[path]

    def _key(self, cloud_digest: str, tag: bytes) -> str:
        digest = hashlib.sha256()
        digest.update(cloud_digest.encode("ascii"))
        digest.update(tag)
        digest.update(self._config_digest.encode("ascii"))
        return digest.hexdigest()

    def _lookup(self, key: str) -> Optional[np.ndarray]:
        if key in self._images:
            return self._images[key]
        if self.cache_dir:
            file = self.cache_dir / f"{key}.npy"
            if file.exists():
                pixels = np.load(file, allow_pickle=False)
                self._images[key] = pixels
                return pixels
        return None

    def _store(self, key: str, pixels: np.ndarray) -> None:
        self._images[key] = pixels
        if self.cache_dir:
            np.save(self.cache_dir / f"{key}.npy", pixels, allow_pickle=False)

    def _get(self, path: Path, tag: bytes, render_fn) -> np.ndarray:
        cloud, cloud_digest = self._cloud(path)
        key = self._key(cloud_digest, tag)
        pixels = self._lookup(key)
        if pixels is not None:
            self.hits += 1
            return pixels
        self.misses += 1
        pixels = render_fn(cloud).pixels
        self._store(key, pixels)
        return pixels

    def rotated_view(self, manifest: DatasetManifest, entry: ManifestEntry, rotation_index: int) -> ProjectedImage:
        """Pre-training rendering: rotate, normalise, render from the +z camera."""
        matrix = self.rotation_matrix(entry.content_id, rotation_index)
        pixels = self._get(
            manifest.resolve(entry),
            b"rotation:" + matrix.tobytes(),
            lambda cloud: render_rotated(cloud, matrix, self.config),
        )
        return ProjectedImage(pixels, view_id=0, content_id=entry.content_id,
                              distortion_id=entry.distortion_id, level=entry.level)

    def six_views(self, manifest: DatasetManifest, entry: ManifestEntry) -> List[ProjectedImage]:
        """Fine-tuning renderings from the six axis cameras."""
        views = []
        for view_id in range(1, len(VIEW_ORDER) + 1):
            pixels = self._get(
                manifest.resolve(entry),
                f"view:{view_id}".encode("ascii"),
                lambda cloud, v=view_id: render_view(cloud, v, self.config),
            )
            views.append(ProjectedImage(pixels, view_id=view_id, content_id=entry.content_id,
                                        distortion_id=entry.distortion_id, level=entry.level))
        return views

    def stats(self) -> Dict[str, int]:
        return {"hits": self.hits, "misses": self.misses, "entries": len(self._images)}


def _warm_job(args) -> int:
    cache_dir, config, seed, rotations, manifest, entry, pretrain, finetune = args
    cache = RenderCache(config, cache_dir, seed, rotations)
    if pretrain:
        for index in range(rotations):
            cache.rotated_view(manifest, entry, index)
    if finetune:
        cache.six_views(manifest, entry)
    return cache.misses


def warm_cache(
    cache: RenderCache,
    manifest: DatasetManifest,
    pretrain: bool = True,
    finetune: bool = True,
    workers: Optional[int] = None,
) -> int:
    """Render every (entry, rotation) and (entry, axis view) into the disk cache.

    Entries are content-addressed, so the result does not depend on the
    worker count or scheduling.

    Returns:
        Number of newly rendered images
    """
    if cache.cache_dir is None:
        raise ValueError("warm_cache needs a cache directory")
    workers = workers or default_workers()
    jobs = [
        (cache.cache_dir, cache.config, cache.seed, cache.rotations_per_cloud, manifest, entry, pretrain, finetune)
        for entry in manifest.entries
    ]
    if workers == 1:
        rendered = sum(_warm_job(job) for job in jobs)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rendered = sum(pool.map(_warm_job, jobs))
    logger.info(f"Render cache warmed: {rendered} new images for {len(jobs)} entries with {workers} workers")
    return rendered
