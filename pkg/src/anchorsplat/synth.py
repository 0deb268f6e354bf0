"""Synthetic blob scenes: analytic colored Gaussian blobs, a camera ring,
and ground truth rendered by the reference per-pixel compositor.

These scenes stand in for photographed datasets at desk scale.  Everything
is drawn from one seeded generator in a fixed order, so a seed pins the
whole directory byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rasterize import composite_naive, frustum_keep, project_gaussians, _sorted_order
from .scene import Camera, PointCloud, look_at_camera, rotation_from_quaternion
from .sceneio import SceneDirectory, load_scene, write_scene
from .tensor import Tensor, no_grad


@dataclass
class Blob:
    """One anisotropic Gaussian: the scene's unit of geometry and color.

    Appearance is view-dependent on purpose: color is the base color shaded
    by a squared-cosine lobe around ``shade_axis`` plus a narrow power-8
    highlight toward ``gloss_axis``, and opacity breathes with a squared
    cosine around ``alpha_axis``.  Flat per-blob appearance would make any
    view-conditioned color or opacity model pointless."""

    center: np.ndarray  # [3]
    scale: np.ndarray  # [3] standard deviations, positive
    quat: np.ndarray  # [4] (w,x,y,z), unit
    color: np.ndarray  # [3] in [0,1]
    alpha: float  # peak opacity in (0,1]
    shade_axis: np.ndarray  # [3] unit
    gloss_axis: np.ndarray  # [3] unit
    alpha_axis: np.ndarray  # [3] unit


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def view_color(blob: Blob, camera: Camera) -> np.ndarray:
    """The blob's color as seen from a camera position."""
    v = _unit(camera.position - blob.center)
    diffuse = 0.55 + 0.45 * float(v @ blob.shade_axis) ** 2
    highlight = 0.40 * max(0.0, float(v @ blob.gloss_axis)) ** 8
    return np.clip(blob.color * diffuse + highlight, 0.0, 1.0)


def view_alpha(blob: Blob, camera: Camera) -> float:
    """The blob's opacity as seen from a camera position."""
    v = _unit(camera.position - blob.center)
    return blob.alpha * (0.55 + 0.45 * float(v @ blob.alpha_axis) ** 2)


def random_blobs(count: int, rng: np.random.Generator, spread: float = 0.7) -> list[Blob]:
    """Blobs scattered around the origin, sized so a handful fills the frame
    from the default ring without merging into one mass."""
    if count < 1:
        raise ValueError("need at least one blob")
    blobs = []
    for _ in range(count):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        blobs.append(
            Blob(
                center=rng.uniform(-spread, spread, size=3),
                scale=rng.uniform(0.10, 0.28, size=3),
                quat=q,
                color=rng.uniform(0.25, 1.0, size=3),
                alpha=float(rng.uniform(0.6, 0.95)),
                shade_axis=_unit(rng.normal(size=3)),
                gloss_axis=_unit(rng.normal(size=3)),
                alpha_axis=_unit(rng.normal(size=3)),
            )
        )
    return blobs


def ring_cameras(
    count: int,
    width: int,
    height: int,
    radius: float = 2.6,
    elevation: float = 0.7,
    fov_deg: float = 50.0,
) -> list[Camera]:
    """Evenly spaced cameras on a circle, all looking at the origin."""
    cameras = []
    for i in range(count):
        ang = 2.0 * np.pi * i / count
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), elevation])
        cameras.append(look_at_camera(eye, np.zeros(3), width, height, fov_deg=fov_deg))
    return cameras


def oracle_render(
    blobs: list[Blob], camera: Camera, background: np.ndarray | None = None
) -> np.ndarray:
    """Ground-truth image: project the blobs and run the reference per-pixel
    compositor (the same loop the tiled rasterizer is checked against)."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    means = np.stack([b.center for b in blobs])
    rotations = np.stack([rotation_from_quaternion(b.quat) for b in blobs])
    scales = np.stack([b.scale for b in blobs])
    with no_grad():
        mean2_t, cov_t, depth = project_gaussians(
            Tensor(means), Tensor(rotations), Tensor(scales), camera
        )
    mean2, cov_abc = mean2_t.data, cov_t.data
    alpha = np.array([view_alpha(b, camera) for b in blobs])
    colors = np.stack([view_color(b, camera) for b in blobs])
    keep = np.flatnonzero(frustum_keep(mean2, cov_abc, depth, camera.width, camera.height))
    order = keep[_sorted_order(depth[keep])]
    img, _, _ = composite_naive(
        mean2[order], cov_abc[order], alpha[order], colors[order],
        camera.width, camera.height, bg,
    )
    return np.clip(img, 0.0, 1.0)


def sample_cloud(
    blobs: list[Blob], rng: np.random.Generator, points_per_blob: int = 60
) -> PointCloud:
    """Points drawn from each blob's own distribution, carrying its color —
    the stand-in for a multi-view reconstruction."""
    points, colors = [], []
    for b in blobs:
        rot = rotation_from_quaternion(b.quat)
        local = rng.normal(size=(points_per_blob, 3)) * b.scale
        points.append(b.center + local @ rot.T)
        colors.append(np.tile(b.color, (points_per_blob, 1)))
    return PointCloud(points=np.concatenate(points), colors=np.concatenate(colors))


def make_blob_scene(
    out_dir: str | Path,
    blob_count: int = 5,
    views: int = 9,
    width: int = 32,
    height: int = 32,
    seed: int = 7,
    points_per_blob: int = 60,
) -> SceneDirectory:
    """Write a complete scene directory and return it loaded back."""
    if views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng(seed)
    blobs = random_blobs(blob_count, rng)
    cloud = sample_cloud(blobs, rng, points_per_blob=points_per_blob)
    cameras = ring_cameras(views, width, height)
    images = [oracle_render(blobs, cam) for cam in cameras]
    write_scene(out_dir, cloud, cameras, images)
    return load_scene(out_dir)
