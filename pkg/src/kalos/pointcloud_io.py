"""Point cloud I/O, dataset manifests and synthetic distortions.

Colours are kept as floats in [0, 1] inside the pipeline; 8-bit values only
exist at PLY file boundaries.
"""

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .config import DISTORTION_KINDS, MAX_LEVEL, DistortionConfig
from .errors import ConfigError, DatasetError, EmptyCloudError, ManifestError, PlyFormatError

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ["path", "content_id", "distortion_id", "level", "mos"]

# PLY scalar type names → little-endian numpy codes
PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
}
FLOAT_TYPES = {"float", "float32", "double", "float64"}
COLOR_TYPES = {"uchar", "uint8"}


@dataclass
class PointCloud:
    """Positions and colours of one point set."""

    positions: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.colors):
            raise ValueError(
                f"positions ({len(self.positions)}) and colors ({len(self.colors)}) differ in length"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if np.any(self.colors < 0.0) or np.any(self.colors > 1.0):
            raise ValueError("color channels must lie in [0, 1]")

    @property
    def point_count(self) -> int:
        return len(self.positions)

    def require_points(self) -> None:
        """Raise EmptyCloudError when the cloud has no points."""
        if self.point_count == 0:
            raise EmptyCloudError("point cloud has no points")

    def to_bytes(self) -> bytes:
        """Canonical byte image used for content hashing."""
        return self.positions.tobytes() + self.colors.tobytes()


@dataclass
class _PlyElement:
    name: str
    count: int
    line_number: int
    properties: List[Tuple[str, str]] = field(default_factory=list)
    has_list: bool = False


def _parse_header(handle) -> Tuple[str, List[_PlyElement], int]:
    """Read a PLY header; returns (format, elements, number of header lines)."""
    first = handle.readline().decode("ascii", errors="replace").strip()
    if first != "ply":
        raise PlyFormatError("file does not start with 'ply'", 1, first)

    fmt = None
    elements: List[_PlyElement] = []
    line_number = 1
    while True:
        raw = handle.readline()
        line_number += 1
        if not raw:
            raise PlyFormatError("header ends before 'end_header'", line_number, "")
        line = raw.decode("ascii", errors="replace").strip()
        tokens = line.split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        keyword = tokens[0]
        if keyword == "end_header":
            break
        if keyword == "format":
            if len(tokens) != 3 or tokens[1] not in ("ascii", "binary_little_endian"):
                raise PlyFormatError("unsupported format (ascii or binary_little_endian 1.0)", line_number, line)
            fmt = tokens[1]
        elif keyword == "element":
            if len(tokens) != 3 or not tokens[2].isdigit():
                raise PlyFormatError("malformed element declaration", line_number, line)
            elements.append(_PlyElement(tokens[1], int(tokens[2]), line_number))
        elif keyword == "property":
            if not elements:
                raise PlyFormatError("property declared before any element", line_number, line)
            if len(tokens) >= 2 and tokens[1] == "list":
                if len(tokens) != 5:
                    raise PlyFormatError("malformed list property", line_number, line)
                elements[-1].has_list = True
                elements[-1].properties.append((tokens[4], "list"))
            else:
                if len(tokens) != 3 or tokens[1] not in PLY_DTYPES:
                    raise PlyFormatError("malformed or unknown property type", line_number, line)
                elements[-1].properties.append((tokens[2], tokens[1]))
        else:
            raise PlyFormatError(f"unknown header keyword {keyword!r}", line_number, line)

    if fmt is None:
        raise PlyFormatError("missing 'format' line", line_number, "end_header")
    return fmt, elements, line_number


def load_ply(path: Path) -> PointCloud:
    """Load a coloured point cloud from an ASCII or binary little-endian PLY file.

    Args:
        path: PLY file path

    Returns:
        PointCloud with colours rescaled from [0, 255] to [0, 1]; point order preserved

    Raises:
        FileNotFoundError: If the file does not exist
        PlyFormatError: If the header is malformed or lacks x,y,z / red,green,blue
        EmptyCloudError: If the vertex element declares zero points
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"PLY file not found: {path}")

    with open(path, "rb") as handle:
        fmt, elements, header_lines = _parse_header(handle)
        body_offset = handle.tell()

    vertex_index = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vertex_index is None:
        raise PlyFormatError("no 'element vertex' declared", header_lines, "end_header")
    vertex = elements[vertex_index]
    names = {name: kind for name, kind in vertex.properties}
    for axis in ("x", "y", "z"):
        if names.get(axis) not in FLOAT_TYPES:
            raise PlyFormatError(
                f"vertex property {axis!r} missing or not float/double",
                vertex.line_number, f"element vertex {vertex.count}",
            )
    for channel in ("red", "green", "blue"):
        if names.get(channel) not in COLOR_TYPES:
            raise PlyFormatError(
                f"vertex colour property {channel!r} missing or not uchar",
                vertex.line_number, f"element vertex {vertex.count}",
            )
    if vertex.count == 0:
        raise EmptyCloudError(f"{path} declares zero vertices")

    if fmt == "ascii":
        table = _read_ascii_vertices(path, body_offset, elements, vertex_index, header_lines)
        columns = {name: table[:, i] for i, (name, _) in enumerate(vertex.properties)}
    else:
        columns = _read_binary_vertices(path, body_offset, elements, vertex_index)

    positions = np.stack([columns[a].astype(np.float64) for a in ("x", "y", "z")], axis=1)
    colors = np.stack([columns[c].astype(np.float64) for c in ("red", "green", "blue")], axis=1) / 255.0
    logger.debug(f"Loaded {len(positions)} points from {path}")
    return PointCloud(positions, colors)


def _read_ascii_vertices(
    path: Path, offset: int, elements: List[_PlyElement], vertex_index: int, header_lines: int
) -> np.ndarray:
    with open(path, "rb") as handle:
        handle.seek(offset)
        lines = handle.read().decode("ascii", errors="replace").splitlines()

    skip = sum(e.count for e in elements[:vertex_index])
    vertex = elements[vertex_index]
    width = len(vertex.properties)
    rows = []
    for i in range(vertex.count):
        line_no = header_lines + skip + i + 1
        if skip + i >= len(lines):
            raise PlyFormatError("file ends before all vertices were read", line_no, "")
        tokens = lines[skip + i].split()
        if len(tokens) != width:
            raise PlyFormatError(f"expected {width} values per vertex", line_no, lines[skip + i])
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise PlyFormatError("non-numeric vertex value", line_no, lines[skip + i]) from None
    return np.asarray(rows, dtype=np.float64)


def _read_binary_vertices(
    path: Path, offset: int, elements: List[_PlyElement], vertex_index: int
) -> Dict[str, np.ndarray]:
    with open(path, "rb") as handle:
        handle.seek(offset)
        data = handle.read()

    for element in elements[:vertex_index]:
        if element.has_list:
            raise PlyFormatError(
                f"binary element {element.name!r} with list properties precedes vertices",
                element.line_number, f"element {element.name} {element.count}",
            )
        dtype = np.dtype([(n, PLY_DTYPES[k]) for n, k in element.properties])
        offset_skip = dtype.itemsize * element.count
        data = data[offset_skip:]

    vertex = elements[vertex_index]
    if vertex.has_list:
        raise PlyFormatError("list properties on vertices are not supported", vertex.line_number,
                             f"element vertex {vertex.count}")
    dtype = np.dtype([(n, PLY_DTYPES[k]) for n, k in vertex.properties])
    needed = dtype.itemsize * vertex.count
    if len(data) < needed:
        raise PlyFormatError("file ends before all vertices were read", vertex.line_number,
                             f"element vertex {vertex.count}")
    records = np.frombuffer(data, dtype=dtype, count=vertex.count)
    return {name: records[name] for name in dtype.names}


def save_ply(cloud: PointCloud, path: Path, binary: bool = False) -> None:
    """Write a point cloud as PLY with double positions and 8-bit colours.

    Args:
        cloud: Non-empty point cloud
        path: Destination file path
        binary: Write binary little-endian instead of ASCII

    Raises:
        EmptyCloudError: If the cloud has no points
        OSError: If the path is not writable
    """
    cloud.require_points()
    path = Path(path)
    colors = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    header = "\n".join([
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        "comment written by kalos",
        f"element vertex {cloud.point_count}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]) + "\n"

    with open(path, "wb") as handle:
        handle.write(header.encode("ascii"))
        if binary:
            records = np.empty(cloud.point_count, dtype=[
                ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                ("red", "u1"), ("green", "u1"), ("blue", "u1"),
            ])
            records["x"], records["y"], records["z"] = cloud.positions.T
            records["red"], records["green"], records["blue"] = colors.T
            handle.write(records.tobytes())
        else:
            for p, c in zip(cloud.positions, colors):
                handle.write(
                    f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {int(c[0])} {int(c[1])} {int(c[2])}\n".encode("ascii")
                )
    logger.debug(f"Saved {cloud.point_count} points to {path}")


@dataclass(frozen=True)
class DistortionSpec:
    """One synthetic distortion: kind, severity level in [1, 7] and seed."""

    kind: str
    level: int
    seed: int = 0


def synth_distort(
    cloud: PointCloud, spec: DistortionSpec, schedule: Optional[DistortionConfig] = None
) -> PointCloud:
    """Apply a synthetic distortion; a pure function of (cloud, spec, schedule).

    Args:
        cloud: Non-empty source cloud
        spec: Distortion kind, level and seed
        schedule: Severity schedule (defaults to DistortionConfig())

    Returns:
        Distorted cloud; only ``downsample`` changes the point count

    Raises:
        ConfigError: If the kind is unknown or the level is out of range
        EmptyCloudError: If the cloud has no points
    """
    if spec.kind not in DISTORTION_KINDS:
        raise ConfigError(f"unknown distortion kind {spec.kind!r}", field="distortion.kind")
    if not 1 <= spec.level <= MAX_LEVEL:
        raise ConfigError(f"level must lie in [1, {MAX_LEVEL}], got {spec.level}", field="distortion.level")
    cloud.require_points()
    schedule = schedule or DistortionConfig()
    rng = np.random.default_rng(spec.seed)
    positions = cloud.positions.copy()
    colors = cloud.colors.copy()

    if spec.kind == "gaussian_geometry_noise":
        positions = positions + rng.normal(0.0, schedule.noise_sigma(spec.level), positions.shape)
    elif spec.kind == "color_noise":
        colors = colors + rng.normal(0.0, schedule.color_sigma(spec.level), colors.shape)
    elif spec.kind == "downsample":
        n = cloud.point_count
        keep = max(1, math.ceil(schedule.keep_fraction(spec.level) * n), math.ceil(0.1 * n))
        index = np.sort(rng.choice(n, size=min(keep, n), replace=False))
        positions, colors = positions[index], colors[index]
    else:  # quantize
        step = schedule.quantize_step(spec.level)
        positions = np.round(positions / step) * step

    return PointCloud(positions, np.clip(colors, 0.0, 1.0))


def synth_reference(content_id: int, n_points: int = 4096, seed: int = 0) -> PointCloud:
    """Generate a procedural reference content with a smooth colour pattern.

    Eight surface families (sphere, torus, cube shell, cylinder, cone, saddle,
    ellipsoid, helix band) cycle with ``content_id``; shape proportions and
    colour phases vary with the id so every content is distinct.
    """
    if n_points < 1:
        raise EmptyCloudError("n_points must be >= 1")
    rng = np.random.default_rng([seed, content_id])
    family = content_id % 8
    u = rng.random(n_points)
    v = rng.random(n_points)
    stretch = 1.0 + 0.25 * (content_id // 8) + 0.2 * rng.random()

    if family == 0:
        p = rng.normal(size=(n_points, 3))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
    elif family == 1:
        a, b = 2 * np.pi * u, 2 * np.pi * v
        p = np.stack([(1 + 0.35 * np.cos(b)) * np.cos(a), (1 + 0.35 * np.cos(b)) * np.sin(a), 0.35 * np.sin(b)], 1)
    elif family == 2:
        face = rng.integers(0, 6, n_points)
        p = np.stack([2 * u - 1, 2 * v - 1, np.ones(n_points)], 1)
        p[face % 2 == 1, 2] = -1.0
        axis = face // 2
        p[axis == 1] = p[axis == 1][:, [2, 0, 1]]
        p[axis == 2] = p[axis == 2][:, [1, 2, 0]]
    elif family == 3:
        a = 2 * np.pi * u
        p = np.stack([np.cos(a), np.sin(a), 2 * v - 1], 1)
    elif family == 4:
        a, h = 2 * np.pi * u, v
        p = np.stack([(1 - h) * np.cos(a), (1 - h) * np.sin(a), 2 * h - 1], 1)
    elif family == 5:
        x, y = 2 * u - 1, 2 * v - 1
        p = np.stack([x, y, 0.5 * (x ** 2 - y ** 2)], 1)
    elif family == 6:
        q = rng.normal(size=(n_points, 3))
        p = q / np.linalg.norm(q, axis=1, keepdims=True) * np.array([1.0, 0.6, 0.4])
    else:
        t = 4 * np.pi * u
        w = 0.3 * (v - 0.5)
        p = np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1 + w], 1)

    p = p * np.array([stretch, 1.0, 1.0])
    direction = rng.normal(size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, 3)
    frequency = 2.0 + 3.0 * rng.random(3)
    colors = 0.5 + 0.45 * np.sin(frequency * (p @ direction.T) + phase)
    return PointCloud(p, np.clip(colors, 0.0, 1.0))


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest row."""

    path: str
    content_id: int
    distortion_id: int
    level: int
    mos: Optional[float] = None

    @property
    def key(self) -> Tuple[int, int, int]:
        return (self.content_id, self.distortion_id, self.level)

    @property
    def distortion_key(self) -> Tuple[int, int]:
        """Identifies one distortion (kind and level) within a content."""
        return (self.distortion_id, self.level)


@dataclass
class DatasetManifest:
    """Ordered list of dataset entries, resolved against ``root``."""

    entries: List[ManifestEntry] = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        seen: Dict[Tuple[int, int, int], int] = {}
        duplicates = []
        for index, entry in enumerate(self.entries):
            if entry.key in seen:
                duplicates.append(f"{entry.key} (rows {seen[entry.key] + 1} and {index + 1})")
            else:
                seen[entry.key] = index
            if entry.mos is not None and not math.isfinite(entry.mos):
                raise ManifestError(f"row {index + 1}: mos must be finite, got {entry.mos}")
        if duplicates:
            raise ManifestError(
                "duplicate (content_id, distortion_id, level) triples: " + "; ".join(duplicates)
            )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        """Absolute path of an entry's cloud file."""
        path = Path(entry.path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def contents(self) -> List[int]:
        return sorted({e.content_id for e in self.entries})

    def by_content(self) -> Dict[int, List[ManifestEntry]]:
        groups: Dict[int, List[ManifestEntry]] = defaultdict(list)
        for entry in self.entries:
            groups[entry.content_id].append(entry)
        return dict(groups)

    def subset(self, content_ids: Iterable[int]) -> "DatasetManifest":
        wanted = set(content_ids)
        return DatasetManifest([e for e in self.entries if e.content_id in wanted], self.root)

    def labeled(self) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.mos is not None], self.root)

    def is_fully_labeled(self) -> bool:
        return all(e.mos is not None for e in self.entries)


def _parse_int(value: str, column: str, row: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise ManifestError(f"row {row}: {column} must be an integer, got {value!r}") from None


def load_manifest(path: Path) -> DatasetManifest:
    """Load a dataset manifest CSV.

    Args:
        path: CSV with header ``path,content_id,distortion_id,level,mos``

    Returns:
        DatasetManifest whose relative paths resolve against the CSV's folder

    Raises:
        FileNotFoundError: If the manifest does not exist
        ManifestError: On a bad header, non-numeric fields or duplicate triples
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")

    entries = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ManifestError(f"header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for row_number, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"row {row_number}: expected 5 columns, got {len(row)}")
            mos_text = row[4].strip()
            mos = None
            if mos_text:
                try:
                    mos = float(mos_text)
                except ValueError:
                    raise ManifestError(f"row {row_number}: non-numeric mos {mos_text!r}") from None
            entries.append(ManifestEntry(
                path=row[0],
                content_id=_parse_int(row[1], "content_id", row_number),
                distortion_id=_parse_int(row[2], "distortion_id", row_number),
                level=_parse_int(row[3], "level", row_number),
                mos=mos,
            ))

    logger.info(f"Loaded manifest with {len(entries)} entries from {path}")
    return DatasetManifest(entries, root=path.parent)


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Write a manifest CSV (blank ``mos`` for unlabeled rows)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.path, e.content_id, e.distortion_id, e.level, "" if e.mos is None else repr(float(e.mos))])
    logger.info(f"Wrote manifest with {len(manifest)} entries to {path}")


def pseudo_mos(level: int, levels: int) -> float:
    """Level-monotone stand-in score: level 1 maps to 5, the last level to 1."""
    if levels == 1:
        return 5.0
    return 1.0 + 4.0 * (levels - level) / (levels - 1)


def synthesize_dataset(
    references: List[Tuple[int, PointCloud]],
    out_dir: Path,
    schedule: DistortionConfig,
    seed: int = 0,
    with_mos: bool = False,
    binary: bool = False,
) -> DatasetManifest:
    """Write every (kind, level) distortion of each reference plus a manifest.

    Files go to ``<out_dir>/content_<id>/<kind>_L<level>.ply``; the manifest
    (``<out_dir>/manifest.csv``) lists distorted rows only, with
    ``distortion_id`` the kind's index in the known distortion kinds.

    Raises:
        DatasetError: If fewer than two references are given
    """
    if len(references) < 2:
        raise DatasetError(f"need at least 2 reference clouds, got {len(references)}")
    out_dir = Path(out_dir)
    entries = []
    for content_id, cloud in references:
        for kind in schedule.kinds:
            distortion_id = DISTORTION_KINDS.index(kind)
            for level in range(1, schedule.levels + 1):
                spec_seed = int(np.random.SeedSequence([seed, content_id, distortion_id, level]).generate_state(1)[0])
                distorted = synth_distort(cloud, DistortionSpec(kind, level, spec_seed), schedule)
                relative = Path(f"content_{content_id:03d}") / f"{kind}_L{level}.ply"
                (out_dir / relative).parent.mkdir(parents=True, exist_ok=True)
                save_ply(distorted, out_dir / relative, binary=binary)
                entries.append(ManifestEntry(
                    path=relative.as_posix(),
                    content_id=content_id,
                    distortion_id=distortion_id,
                    level=level,
                    mos=pseudo_mos(level, schedule.levels) if with_mos else None,
                ))
    manifest = DatasetManifest(entries, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest
