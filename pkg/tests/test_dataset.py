"""Manifest parsing, image IO, camera layout, and synthetic scenes."""

import os

import numpy as np
import pytest

from lpgs.codec import load_ply_points
from lpgs.dataset import (DatasetManifest, ManifestEntry, downscale_image,
                          load_dataset, load_image, make_cameras,
                          make_synthetic_splats, read_manifest, render_splats,
                          save_image, write_manifest, write_synth_dataset)
from lpgs.errors import DatasetError

QUANT = 0.5 / 255.0 + 1e-6      # 8-bit rounding bound


def touch_image(directory, rel, size=(4, 4)):
    path = os.path.join(directory, rel)
    os.makedirs(os.path.dirname(path) or directory, exist_ok=True)
    save_image(path, np.zeros((size[1], size[0], 3)))


def two_view_manifest(directory):
    cams = make_cameras(2, (8, 6))
    touch_image(directory, "a.png", (8, 6))
    touch_image(directory, "b.png", (8, 6))
    entries = [ManifestEntry("a.png", cams[0]),
               ManifestEntry("b.png", cams[1], holdout=True)]
    return DatasetManifest((8, 6), entries)


class TestManifest:
    def test_round_trip(self, tmp_path):
        d = str(tmp_path)
        manifest = two_view_manifest(d)
        write_manifest(d, manifest)
        got = read_manifest(d)
        assert got.resolution == (8, 6)
        assert got.init_ply is None
        assert [e.holdout for e in got.entries] == [False, True]
        for before, after in zip(manifest.entries, got.entries):
            assert after.path == before.path
            assert np.array_equal(after.camera.world_to_view,
                                  before.camera.world_to_view)
            assert after.camera.focal == before.camera.focal
            assert after.camera.principal_point == \
                before.camera.principal_point
            assert after.camera.resolution == (8, 6)

    def test_init_ply_survives(self, tmp_path):
        d = str(tmp_path)
        manifest = two_view_manifest(d)
        manifest.init_ply = "pts.ply"
        (tmp_path / "pts.ply").write_bytes(b"x")
        write_manifest(d, manifest)
        assert read_manifest(d).init_ply == "pts.ply"

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="no manifest"):
            read_manifest(str(tmp_path))

    @pytest.mark.parametrize("text,match", [
        ("garbage\n", "header"),
        ("lpgs-manifest 2\nresolution 4 4\n", "version"),
        ("lpgs-manifest 1\nresolution 4\n", "two integers"),
        ("lpgs-manifest 1\n", "no resolution"),
        ("lpgs-manifest 1\nresolution 4 4\nwat x\n", "unknown"),
        ("lpgs-manifest 1\nresolution 4 4\n", "no training images"),
    ])
    def test_malformed_lines(self, tmp_path, text, match):
        (tmp_path / "manifest.txt").write_text(text)
        with pytest.raises(DatasetError, match=match):
            read_manifest(str(tmp_path))

    def test_image_entry_before_resolution(self, tmp_path):
        cam_nums = " ".join(["1.0"] * 20)
        (tmp_path / "manifest.txt").write_text(
            f"lpgs-manifest 1\nimage a.png {cam_nums}\n")
        with pytest.raises(DatasetError, match="precede"):
            read_manifest(str(tmp_path))

    @pytest.mark.parametrize("nums,match", [
        (" ".join(["1.0"] * 19), "20 numbers"),
        (" ".join(["1.0"] * 19) + " oops", "bad number"),
    ])
    def test_bad_camera_line(self, tmp_path, nums, match):
        touch_image(str(tmp_path), "a.png")
        (tmp_path / "manifest.txt").write_text(
            f"lpgs-manifest 1\nresolution 4 4\nimage a.png {nums}\n")
        with pytest.raises(DatasetError, match=match):
            read_manifest(str(tmp_path))

    def test_missing_referenced_image(self, tmp_path):
        d = str(tmp_path)
        manifest = two_view_manifest(d)
        write_manifest(d, manifest)
        os.remove(os.path.join(d, "b.png"))
        with pytest.raises(DatasetError, match="missing"):
            read_manifest(d)

    def test_missing_point_cloud(self, tmp_path):
        d = str(tmp_path)
        manifest = two_view_manifest(d)
        manifest.init_ply = "gone.ply"
        write_manifest(d, manifest)
        with pytest.raises(DatasetError, match="point cloud"):
            read_manifest(d)


class TestImages:
    def test_png_round_trip_quantization(self, tmp_path, rng):
        img = rng.uniform(0, 1, (12, 10, 3))
        path = str(tmp_path / "x.png")
        save_image(path, img)
        back = load_image(path)
        assert back.shape == (12, 10, 3)
        assert back.dtype == np.float32
        assert np.max(np.abs(back - img)) <= QUANT

    def test_save_clips_out_of_range(self, tmp_path):
        path = str(tmp_path / "x.png")
        save_image(path, np.array([[[-0.5, 0.5, 1.5]]]))
        got = load_image(path)[0, 0]
        assert got[0] == 0.0 and got[2] == 1.0
        assert abs(got[1] - 0.5) <= QUANT

    def test_load_rejects_non_image(self, tmp_path):
        path = tmp_path / "x.png"
        path.write_bytes(b"not a png")
        with pytest.raises(DatasetError, match="cannot read"):
            load_image(str(path))

    def test_downscale_exact_block_mean(self, rng):
        img = rng.uniform(0, 1, (8, 12, 3))
        out = downscale_image(img, 2)
        want = img.reshape(4, 2, 6, 2, 3).mean(axis=(1, 3))
        assert np.allclose(out, want, atol=1e-12)

    def test_downscale_factor_one_is_identity(self, rng):
        img = rng.uniform(0, 1, (5, 5, 3))
        assert downscale_image(img, 1) is img

    def test_downscale_non_divisible(self, rng):
        img = rng.uniform(0, 1, (7, 9, 3)).astype(np.float32)
        out = downscale_image(img, 2)
        assert out.shape == (3, 4, 3)
        assert out.min() >= img.min() - 1e-6
        assert out.max() <= img.max() + 1e-6


class TestCameras:
    def test_layout_properties(self):
        cams = make_cameras(10, (32, 24), radius=3.2)
        assert len(cams) == 10
        for cam in cams:
            c = cam.center()
            assert abs(np.linalg.norm(c) - 3.2) < 1e-9
            R = cam.world_to_view[:3, :3]
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(R) - 1.0) < 1e-9
            origin_view = cam.world_to_view @ np.array([0, 0, 0, 1.0])
            assert abs(origin_view[0]) < 1e-9
            assert abs(origin_view[1]) < 1e-9
            assert abs(origin_view[2] - 3.2) < 1e-9
            assert cam.resolution == (32, 24)
            assert cam.principal_point == (15.5, 11.5)

    def test_deterministic(self):
        a = make_cameras(5, (16, 16))
        b = make_cameras(5, (16, 16))
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.world_to_view, cb.world_to_view)

    def test_polar_camera_does_not_degenerate(self):
        # a single camera sits near the top of the band; rotation stays valid
        cams = make_cameras(1, (16, 16))
        R = cams[0].world_to_view[:3, :3]
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)


class TestSyntheticScene:
    def test_splats_deterministic_and_bounded(self):
        a = make_synthetic_splats(3, 20)
        b = make_synthetic_splats(3, 20)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.colors, b.colors)
        assert not np.array_equal(
            a.positions, make_synthetic_splats(4, 20).positions)
        assert np.all(np.abs(a.positions) <= 0.8)
        assert np.allclose(np.linalg.norm(a.rotations, axis=1), 1.0)
        assert np.all((a.opacities >= 0.5) & (a.opacities <= 0.99))

    def test_render_splats_shape_and_content(self):
        scene = make_synthetic_splats(3, 20)
        cam = make_cameras(3, (32, 32))[1]
        img = render_splats(scene, cam)
        assert img.shape == (32, 32, 3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert img.max() > 0.05

    def test_write_synth_dataset(self, tmp_path):
        d = str(tmp_path)
        manifest = write_synth_dataset(d, seed=7, n_gaussians=10,
                                       n_cameras=4, resolution=(24, 24),
                                       holdout=2)
        assert len(manifest.entries) == 6
        train, holdout, got = load_dataset(d)
        assert len(train) == 4 and len(holdout) == 2
        assert got.resolution == (24, 24)

        scene = make_synthetic_splats(7, 10)
        cam, img = train[2]
        want = render_splats(scene, cam)
        assert np.max(np.abs(img - want)) <= QUANT

        # seed cloud undersamples the scene: half the centers, jittered
        pts = load_ply_points(os.path.join(d, "points.ply"))
        assert pts.shape == (5, 3)
        dists = np.linalg.norm(pts[:, None] - scene.positions[None], axis=2)
        assert np.all(dists.min(axis=1) < 0.05)
        assert len(set(dists.argmin(axis=1))) == 5  # distinct centers

    def test_synth_init_keep_full(self, tmp_path):
        d = str(tmp_path)
        write_synth_dataset(d, seed=7, n_gaussians=10, n_cameras=2,
                            resolution=(16, 16), holdout=0, init_keep=1.0)
        pts = load_ply_points(os.path.join(d, "points.ply"))
        scene = make_synthetic_splats(7, 10)
        assert pts.shape == (10, 3)
        assert np.max(np.abs(pts - scene.positions)) < 0.05

    def test_synth_dataset_reproducible(self, tmp_path):
        d1, d2 = str(tmp_path / "a"), str(tmp_path / "b")
        for d in (d1, d2):
            write_synth_dataset(d, seed=5, n_gaussians=8, n_cameras=3,
                                resolution=(16, 16), holdout=1)
        m1 = (tmp_path / "a" / "manifest.txt").read_text()
        assert m1 == (tmp_path / "b" / "manifest.txt").read_text()
        img1 = (tmp_path / "a" / "images" / "view_000.png").read_bytes()
        assert img1 == (tmp_path / "b" / "images" / "view_000.png").read_bytes()
