from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from kalos.config import DistortionConfig
from kalos.errors import ConfigError, DatasetError, EmptyCloudError, ManifestError, PlyFormatError
from kalos.pointcloud_io import (
    DatasetManifest,
    DistortionSpec,
    ManifestEntry,
    PointCloud,
    load_manifest,
    load_ply,
    pseudo_mos,
    save_ply,
    synth_distort,
    synth_reference,
    synthesize_dataset,
    write_manifest,
)

ASCII_HEADER = """ply
format ascii 1.0
element vertex {count}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""


def _random_cloud(n: int, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(rng.normal(size=(n, 3)), rng.random((n, 3)))


def test_point_cloud_rejects_bad_colors_and_lengths() -> None:
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.full((2, 3), 1.5))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0.0, 0.0]]), np.zeros((1, 3)))


def test_load_ply_single_red_vertex(tmp_path: Path) -> None:
    path = tmp_path / "one.ply"
    path.write_text(ASCII_HEADER.format(count=1) + "0 0 0 255 0 0\n", encoding="ascii")

    cloud = load_ply(path)

    assert cloud.point_count == 1
    np.testing.assert_array_equal(cloud.positions, [[0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(cloud.colors, [[1.0, 0.0, 0.0]])


def test_load_ply_missing_file(tmp_path: Path) -> None:
    with pytest.raises(FileNotFoundError):
        load_ply(tmp_path / "missing.ply")


def test_load_ply_missing_color_names_element_line(tmp_path: Path) -> None:
    path = tmp_path / "nocolor.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n"
        "end_header\n0 0 0\n",
        encoding="ascii",
    )
    with pytest.raises(PlyFormatError) as exc_info:
        load_ply(path)
    assert exc_info.value.line_number == 3
    assert "red" in str(exc_info.value)


def test_load_ply_unsupported_format_line(tmp_path: Path) -> None:
    path = tmp_path / "bigendian.ply"
    path.write_text(ASCII_HEADER.format(count=1).replace("ascii", "binary_big_endian"), encoding="ascii")
    with pytest.raises(PlyFormatError) as exc_info:
        load_ply(path)
    assert exc_info.value.line_number == 2


def test_load_ply_short_body_reports_line(tmp_path: Path) -> None:
    path = tmp_path / "short.ply"
    path.write_text(ASCII_HEADER.format(count=2) + "0 0 0 1 2 3\n", encoding="ascii")
    with pytest.raises(PlyFormatError) as exc_info:
        load_ply(path)
    assert exc_info.value.line_number == 12


def test_load_ply_zero_vertices(tmp_path: Path) -> None:
    path = tmp_path / "empty.ply"
    path.write_text(ASCII_HEADER.format(count=0), encoding="ascii")
    with pytest.raises(EmptyCloudError):
        load_ply(path)


@pytest.mark.parametrize("binary", [False, True])
def test_save_then_load_within_color_quantization(tmp_path: Path, binary: bool) -> None:
    cloud = _random_cloud(200, seed=3)
    path = tmp_path / "cloud.ply"
    save_ply(cloud, path, binary=binary)

    loaded = load_ply(path)

    np.testing.assert_array_equal(loaded.positions, cloud.positions)
    assert np.max(np.abs(loaded.colors - cloud.colors)) <= 0.5 / 255 + 1e-12


def test_binary_and_ascii_encodings_load_identically(tmp_path: Path) -> None:
    cloud = _random_cloud(100, seed=4)
    save_ply(cloud, tmp_path / "a.ply", binary=False)
    save_ply(cloud, tmp_path / "b.ply", binary=True)

    ascii_cloud = load_ply(tmp_path / "a.ply")
    binary_cloud = load_ply(tmp_path / "b.ply")

    np.testing.assert_array_equal(ascii_cloud.positions, binary_cloud.positions)
    np.testing.assert_array_equal(ascii_cloud.colors, binary_cloud.colors)


def test_binary_file_is_smaller(tmp_path: Path) -> None:
    cloud = _random_cloud(1000, seed=5)
    save_ply(cloud, tmp_path / "a.ply", binary=False)
    save_ply(cloud, tmp_path / "b.ply", binary=True)
    assert (tmp_path / "b.ply").stat().st_size < (tmp_path / "a.ply").stat().st_size


def test_save_empty_cloud_raises(tmp_path: Path) -> None:
    with pytest.raises(EmptyCloudError):
        save_ply(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), tmp_path / "empty.ply")


def test_synth_distort_unknown_kind_and_level() -> None:
    cloud = _random_cloud(10)
    with pytest.raises(ConfigError):
        synth_distort(cloud, DistortionSpec("blur", 1, 0))
    with pytest.raises(ConfigError):
        synth_distort(cloud, DistortionSpec("color_noise", 8, 0))


def test_geometry_noise_grows_with_level() -> None:
    cloud = _random_cloud(500, seed=1)
    low = synth_distort(cloud, DistortionSpec("gaussian_geometry_noise", 1, 7))
    high = synth_distort(cloud, DistortionSpec("gaussian_geometry_noise", 7, 7))

    low_shift = np.linalg.norm(low.positions - cloud.positions, axis=1).mean()
    high_shift = np.linalg.norm(high.positions - cloud.positions, axis=1).mean()
    assert high_shift > low_shift


def test_geometry_noise_matches_configured_sigma() -> None:
    schedule = DistortionConfig()
    cloud = _random_cloud(10_000, seed=2)
    noisy = synth_distort(cloud, DistortionSpec("gaussian_geometry_noise", 4, 11), schedule)

    displacement = noisy.positions - cloud.positions
    assert np.std(displacement) == pytest.approx(schedule.noise_sigma(4), rel=0.05)
    np.testing.assert_array_equal(noisy.colors, cloud.colors)


def test_downsample_is_deterministic_and_keeps_ten_percent() -> None:
    cloud = _random_cloud(400, seed=6)
    first = synth_distort(cloud, DistortionSpec("downsample", 1, 5))
    second = synth_distort(cloud, DistortionSpec("downsample", 1, 5))
    np.testing.assert_array_equal(first.positions, second.positions)
    assert first.point_count == math.ceil(DistortionConfig().keep_fraction(1) * 400)

    harshest = synth_distort(cloud, DistortionSpec("downsample", 7, 5))
    assert harshest.point_count >= 40


def test_quantize_snaps_to_grid() -> None:
    schedule = DistortionConfig()
    cloud = _random_cloud(100, seed=8)
    step = schedule.quantize_step(3)

    quantized = synth_distort(cloud, DistortionSpec("quantize", 3, 0), schedule)

    ratio = quantized.positions / step
    np.testing.assert_allclose(ratio, np.round(ratio), atol=1e-9)
    assert quantized.point_count == cloud.point_count


def test_color_noise_stays_in_range() -> None:
    cloud = _random_cloud(300, seed=9)
    noisy = synth_distort(cloud, DistortionSpec("color_noise", 7, 1))
    assert noisy.colors.min() >= 0.0
    assert noisy.colors.max() <= 1.0
    np.testing.assert_array_equal(noisy.positions, cloud.positions)


def test_synth_reference_is_seeded_and_distinct() -> None:
    a = synth_reference(3, n_points=64, seed=0)
    b = synth_reference(3, n_points=64, seed=0)
    c = synth_reference(4, n_points=64, seed=0)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)
    with pytest.raises(EmptyCloudError):
        synth_reference(0, n_points=0)


def _write_csv(path: Path, rows: list[str]) -> None:
    path.write_text("path,content_id,distortion_id,level,mos\n" + "".join(r + "\n" for r in rows), encoding="utf-8")


def test_load_manifest_keeps_order_and_blank_mos(tmp_path: Path) -> None:
    path = tmp_path / "manifest.csv"
    _write_csv(path, ["b.ply,1,0,2,3.5", "a.ply,0,1,1,"])

    manifest = load_manifest(path)

    assert [e.path for e in manifest.entries] == ["b.ply", "a.ply"]
    assert manifest.entries[0].mos == 3.5
    assert manifest.entries[1].mos is None
    assert manifest.resolve(manifest.entries[1]) == tmp_path / "a.ply"
    assert not manifest.is_fully_labeled()
    assert len(manifest.labeled()) == 1


def test_load_manifest_rejects_duplicates(tmp_path: Path) -> None:
    path = tmp_path / "manifest.csv"
    _write_csv(path, ["a.ply,0,1,1,2", "b.ply,0,1,1,3"])
    with pytest.raises(ManifestError, match=r"\(0, 1, 1\)"):
        load_manifest(path)


def test_load_manifest_rejects_non_numeric_mos(tmp_path: Path) -> None:
    path = tmp_path / "manifest.csv"
    _write_csv(path, ["a.ply,0,1,1,good"])
    with pytest.raises(ManifestError, match="non-numeric mos"):
        load_manifest(path)


def test_load_manifest_rejects_bad_header(tmp_path: Path) -> None:
    path = tmp_path / "manifest.csv"
    path.write_text("file,content,kind,level,score\n", encoding="utf-8")
    with pytest.raises(ManifestError, match="header"):
        load_manifest(path)


def test_write_then_load_manifest(tmp_path: Path) -> None:
    rng = np.random.default_rng(0)
    entries = [
        ManifestEntry(
            path=f"content_{i:03d}/x.ply",
            content_id=i,
            distortion_id=int(rng.integers(0, 4)),
            level=int(rng.integers(1, 8)),
            mos=None if i % 7 == 0 else float(rng.uniform(1, 5)),
        )
        for i in range(50)
    ]
    path = tmp_path / "manifest.csv"
    write_manifest(DatasetManifest(entries), path)

    assert load_manifest(path).entries == entries


def test_manifest_grouping_helpers() -> None:
    manifest = DatasetManifest([
        ManifestEntry("a", 2, 0, 1, 1.0),
        ManifestEntry("b", 1, 0, 1, 2.0),
        ManifestEntry("c", 2, 1, 1, 3.0),
    ])
    assert manifest.contents() == [1, 2]
    assert [e.path for e in manifest.by_content()[2]] == ["a", "c"]
    assert [e.path for e in manifest.subset([1])] == ["b"]


def test_pseudo_mos_is_monotone() -> None:
    scores = [pseudo_mos(level, 7) for level in range(1, 8)]
    assert scores[0] == 5.0
    assert scores[-1] == 1.0
    assert all(a > b for a, b in zip(scores, scores[1:]))
    assert pseudo_mos(1, 1) == 5.0


def test_synthesize_dataset_layout(tmp_path: Path) -> None:
    references = [(c, synth_reference(c, n_points=100)) for c in range(2)]

    manifest = synthesize_dataset(references, tmp_path / "data", DistortionConfig(), seed=1, with_mos=True)

    assert len(manifest) == 2 * 4 * 7
    assert (tmp_path / "data" / "manifest.csv").exists()
    assert (tmp_path / "data" / "content_001" / "quantize_L7.ply").exists()
    assert load_manifest(tmp_path / "data" / "manifest.csv").entries == manifest.entries
    assert all(e.mos is not None for e in manifest.entries)


def test_synthesize_dataset_is_byte_identical_on_rerun(tmp_path: Path) -> None:
    references = [(c, synth_reference(c, n_points=80)) for c in range(2)]
    schedule = DistortionConfig(kinds=["gaussian_geometry_noise", "downsample"], levels=2)

    first = synthesize_dataset(references, tmp_path / "one", schedule, seed=3, binary=True)
    synthesize_dataset(references, tmp_path / "two", schedule, seed=3, binary=True)

    for entry in first.entries:
        assert (tmp_path / "one" / entry.path).read_bytes() == (tmp_path / "two" / entry.path).read_bytes()
    assert (tmp_path / "one" / "manifest.csv").read_bytes() == (tmp_path / "two" / "manifest.csv").read_bytes()


def test_synthesize_dataset_needs_two_references(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        synthesize_dataset([(0, synth_reference(0, n_points=10))], tmp_path, DistortionConfig())


def test_synthesize_dataset_creates_content_folders(tmp_path: Path) -> None:
    references = [(c, synth_reference(c, n_points=60)) for c in range(2)]
    schedule = DistortionConfig(kinds=["gaussian_geometry_noise", "color_noise"], levels=2)
    out_dir = tmp_path / "fresh" / "nested"

    manifest = synthesize_dataset(references, out_dir, schedule, seed=0)

    assert sorted(p.name for p in out_dir.iterdir()) == ["content_000", "content_001", "manifest.csv"]
    assert all((out_dir / e.path).is_file() for e in manifest.entries)
    assert len(manifest) == 2 * 2 * 2
