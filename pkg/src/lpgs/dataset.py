"""Dataset manifests, image files, and synthetic scene generation.

A dataset directory holds a plain-text manifest plus PNG images and an
optional seed point cloud. The manifest format is line based:

    lpgs-manifest 1
    resolution <width> <height>
    init_ply <relative path>                (optional)
    image <relpath> <fx> <fy> <cx> <cy> <16 world-to-view floats>
    holdout <relpath> ... (same fields; excluded from training)

Synthetic datasets render a seeded set of explicit gaussians from cameras
on a sphere looking at the origin, write the views as 8-bit PNGs, and seed
the point cloud with the (optionally jittered) gaussian centers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .core import Camera
from .errors import DatasetError
from .rasterizer import project_batch, rasterize_arrays

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    path: str
    camera: Camera
    holdout: bool = False


@dataclass
class DatasetManifest:
    resolution: tuple
    entries: list = field(default_factory=list)
    init_ply: str = None


def _camera_fields(camera: Camera):
    fx, fy = camera.focal
    cx, cy = camera.principal_point
    vals = [fx, fy, cx, cy] + list(camera.world_to_view.reshape(-1))
    return " ".join(repr(float(v)) for v in vals)


def _parse_camera(fields, resolution):
    if len(fields) != 20:
        raise DatasetError(f"camera line needs 20 numbers, got {len(fields)}")
    try:
        vals = [float(v) for v in fields]
    except ValueError as exc:
        raise DatasetError(f"bad number in camera line: {exc}") from None
    m = np.array(vals[4:], dtype=np.float64).reshape(4, 4)
    return Camera(m, (vals[0], vals[1]), (vals[2], vals[3]), resolution)


def write_manifest(directory, manifest: DatasetManifest):
    lines = [f"lpgs-manifest {MANIFEST_VERSION}",
             f"resolution {manifest.resolution[0]} {manifest.resolution[1]}"]
    if manifest.init_ply:
        lines.append(f"init_ply {manifest.init_ply}")
    for e in manifest.entries:
        kind = "holdout" if e.holdout else "image"
        lines.append(f"{kind} {e.path} {_camera_fields(e.camera)}")
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DatasetError(f"no manifest at {path}")
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("lpgs-manifest"):
        raise DatasetError("missing manifest header line")
    parts = lines[0].split()
    if len(parts) != 2 or parts[1] != str(MANIFEST_VERSION):
        raise DatasetError(f"unsupported manifest version: {lines[0]!r}")
    resolution = None
    init_ply = None
    entries = []
    for ln in lines[1:]:
        fields = ln.split()
        tag = fields[0]
        if tag == "resolution":
            if len(fields) != 3:
                raise DatasetError("resolution line needs two integers")
            resolution = (int(fields[1]), int(fields[2]))
        elif tag == "init_ply":
            init_ply = fields[1]
        elif tag in ("image", "holdout"):
            if resolution is None:
                raise DatasetError("resolution must precede image entries")
            cam = _parse_camera(fields[2:], resolution)
            entries.append(ManifestEntry(fields[1], cam, tag == "holdout"))
        else:
            raise DatasetError(f"unknown manifest line: {tag!r}")
    if resolution is None:
        raise DatasetError("manifest has no resolution line")
    if not any(not e.holdout for e in entries):
        raise DatasetError("manifest has no training images")
    for e in entries:
        full = os.path.join(directory, e.path)
        if not os.path.exists(full):
            raise DatasetError(f"referenced image missing: {e.path}")
    if init_ply and not os.path.exists(os.path.join(directory, init_ply)):
        raise DatasetError(f"referenced point cloud missing: {init_ply}")
    return DatasetManifest(resolution, entries, init_ply)


def save_image(path, img):
    """Write a float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_image(path):
    """Read an image file as float32 (H, W, 3) in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from None
    return arr / 255.0


def downscale_image(img, factor):
    """Area-average downscale by an integer factor."""
    if factor <= 1:
        return img
    h, w = img.shape[:2]
    if h % factor == 0 and w % factor == 0:
        view = img.reshape(h // factor, factor, w // factor, factor, -1)
        out = view.mean(axis=(1, 3))
        return out.reshape(h // factor, w // factor, *img.shape[2:])
    nh, nw = max(h // factor, 1), max(w // factor, 1)
    chans = []
    for c in range(img.shape[2]):
        im = Image.fromarray(np.asarray(img[..., c], dtype=np.float32),
                             mode="F")
        chans.append(np.asarray(im.resize((nw, nh), Image.BOX)))
    return np.stack(chans, axis=-1).astype(img.dtype)


def load_dataset(directory):
    """Returns (train items, holdout items, manifest); items are
    (Camera, image) pairs."""
    manifest = read_manifest(directory)
    train, holdout = [], []
    for e in manifest.entries:
        img = load_image(os.path.join(directory, e.path))
        (holdout if e.holdout else train).append((e.camera, img))
    return train, holdout, manifest


def _look_at(eye, target, up=(0.0, 0.0, 1.0)):
    eye = np.asarray(eye, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-8:
        x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, :3] = np.stack([x, y, z])
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def make_cameras(n, resolution, radius=3.2, focal_factor=0.9):
    """Cameras on an origin-centered sphere band, deterministic layout."""
    w, h = resolution
    focal = focal_factor * min(w, h)
    pp = ((w - 1) / 2.0, (h - 1) / 2.0)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cams = []
    for i in range(n):
        z = -0.6 + 1.2 * (i + 0.5) / n
        r = np.sqrt(max(1.0 - z * z, 0.0))
        theta = i * golden
        eye = radius * np.array([r * np.cos(theta), r * np.sin(theta), z])
        cams.append(Camera(_look_at(eye, np.zeros(3)), (focal, focal), pp,
                           resolution))
    return cams


@dataclass
class SyntheticScene:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray


def make_synthetic_splats(seed, n):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-0.8, 0.8, size=(n, 3))
    scales = rng.uniform(0.05, 0.25, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.maximum(np.linalg.norm(quats, axis=1, keepdims=True), 1e-12)
    opacities = rng.uniform(0.5, 0.99, size=n)
    colors = rng.uniform(0.1, 0.95, size=(n, 3))
    return SyntheticScene(positions, scales, quats, opacities, colors)


def render_splats(scene: SyntheticScene, camera, background=(0.0, 0.0, 0.0)):
    """Reference render of explicit gaussians (no tree expansion)."""
    means2d, covs2d, depths, kept, _ = project_batch(
        scene.positions.astype(np.float64),
        scene.scales.astype(np.float64),
        scene.rotations.astype(np.float64), camera)
    w, h = camera.resolution
    out, _ = rasterize_arrays(means2d, covs2d, depths,
                              scene.colors.astype(np.float64)[kept],
                              scene.opacities.astype(np.float64)[kept],
                              background, w, h)
    return out.image


def write_synth_dataset(directory, seed=7, n_gaussians=50, n_cameras=20,
                        resolution=(64, 64), holdout=1, jitter=0.005,
                        init_keep=0.5):
    """Generate and write a synthetic dataset; returns the manifest.

    Renders n_cameras training views plus `holdout` extra views from the
    same sphere. The seed point cloud deliberately undersamples the scene:
    a seeded random subset (fraction init_keep) of the gaussian centers,
    jittered by a small offset. Sparse reconstructions never deliver one
    point per scene element, and an undersampled seed is what makes tree
    maintenance earn its keep during training.
    """
    from .codec import write_ply_points
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    scene = make_synthetic_splats(seed, n_gaussians)
    cams = make_cameras(n_cameras + holdout, resolution)
    entries = []
    for i, cam in enumerate(cams):
        img = render_splats(scene, cam)
        rel = f"images/view_{i:03d}.png"
        save_image(os.path.join(directory, rel), img)
        entries.append(ManifestEntry(rel, cam, holdout=i >= n_cameras))
    rng = np.random.default_rng(seed + 1)
    n_keep = max(1, min(n_gaussians, int(round(init_keep * n_gaussians))))
    kept = np.sort(rng.choice(n_gaussians, size=n_keep, replace=False))
    points = scene.positions[kept] + jitter * rng.standard_normal((n_keep, 3))
    write_ply_points(os.path.join(directory, "points.ply"), points)
    manifest = DatasetManifest(resolution, entries, "points.ply")
    write_manifest(directory, manifest)
    return manifest
