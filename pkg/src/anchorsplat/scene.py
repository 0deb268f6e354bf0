"""Static scene structure: point clouds, voxelized anchors, cameras, and
the per-view geometry decoding of neural Gaussians.

Anchors live at voxel centers of the input point cloud.  Each one carries a
32-dim feature (plus two tiled downsampled views of it forming a small
multi-resolution bank), a per-axis scale, and k learnable offsets that
spawn k Gaussians around the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

FEATURE_DIM = 32


# -- point cloud ---------------------------------------------------------------


@dataclass
class PointCloud:
    """Positions in scene units, optionally with per-point RGB in [0,1]."""

    points: np.ndarray  # [N,3] float64
    colors: np.ndarray | None = None  # [N,3] float64 or None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise ValueError("empty point cloud")
        if not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if self.colors.shape[0] != self.points.shape[0]:
                raise ValueError("color count does not match point count")

    def __len__(self) -> int:
        return self.points.shape[0]


# -- anchors --------------------------------------------------------------------


@dataclass
class Anchor:
    """A voxel-center record spawning k neural Gaussians.

    ``feature_down1``/``feature_down2`` are derived views of ``feature``
    (every 2nd / 4th component tiled back to full width), not independent
    parameters.
    """

    position: np.ndarray  # [3]
    feature: np.ndarray  # [FEATURE_DIM]
    scale: np.ndarray  # [3], positive
    offsets: np.ndarray  # [k,3]

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.feature = np.asarray(self.feature, dtype=np.float64).reshape(-1)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if not (self.scale > 0).all():
            raise ValueError("anchor scale must be positive")
        if not np.isfinite(self.offsets).all():
            raise ValueError("anchor offsets must be finite")

    @property
    def k(self) -> int:
        return self.offsets.shape[0]

    @property
    def feature_down1(self) -> np.ndarray:
        return np.tile(self.feature[::2], 2)

    @property
    def feature_down2(self) -> np.ndarray:
        return np.tile(self.feature[::4], 4)


def voxelize_anchors(
    cloud: PointCloud,
    eps: float,
    k: int = 10,
    feature_dim: int = FEATURE_DIM,
    rng: np.random.Generator | None = None,
) -> list[Anchor]:
    """Snap points to a grid of spacing ``eps`` and return one anchor per
    occupied voxel, sorted lexicographically by (x, y, z).

    Rounding is round-half-to-even for cross-platform determinism.
    Features start uniform in [-0.01, 0.01], offsets in [-0.5, 0.5], and
    the scale starts at the voxel size on every axis.
    """
    if eps <= 0:
        raise ValueError("invalid voxel size")
    if rng is None:
        rng = np.random.default_rng(0)
    keys = np.unique(np.round(cloud.points / eps).astype(np.int64), axis=0)
    anchors = []
    for key in keys:  # np.unique already sorted rows lexicographically
        anchors.append(
            Anchor(
                position=key.astype(np.float64) * eps,
                feature=rng.uniform(-0.01, 0.01, size=feature_dim),
                scale=np.full(3, eps),
                offsets=rng.uniform(-0.5, 0.5, size=(k, 3)),
            )
        )
    return anchors


# -- cameras ---------------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera: world-to-camera rotation/translation plus intrinsics.

    Pixel (ix, iy) is sampled at continuous coordinates (ix+0.5, iy+0.5);
    the principal point follows the same convention.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # [3,3] world-to-camera
    translation: np.ndarray  # [3]

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates, x_c = -R^T t."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
        )


def look_at_camera(
    eye: np.ndarray,
    target: np.ndarray,
    width: int,
    height: int,
    fov_deg: float = 50.0,
    up: np.ndarray = (0.0, 0.0, 1.0),
) -> Camera:
    """Camera at ``eye`` looking toward ``target`` with +z forward in the
    camera frame."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:  # looking straight along up
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])  # rows = camera axes
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(
        width=width,
        height=height,
        fx=fx,
        fy=fx,
        cx=width / 2.0,
        cy=height / 2.0,
        rotation=rotation,
        translation=-rotation @ eye,
    )


# -- per-view context -------------------------------------------------------------


@dataclass
class ViewContext:
    """Distance and unit direction from the camera center to an anchor."""

    distance: float
    direction: np.ndarray  # [3], unit norm

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)


def view_context(anchor: Anchor, camera: Camera) -> ViewContext:
    """delta = ||position - x_c||, direction = (position - x_c)/delta."""
    rel = anchor.position - camera.position
    dist = float(np.linalg.norm(rel))
    if dist < 1e-9:
        raise ValueError("degenerate view direction")
    return ViewContext(distance=dist, direction=rel / dist)


def view_context_arrays(
    positions: np.ndarray, camera: Camera
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized view contexts for [N,3] anchor positions."""
    rel = positions - camera.position
    dist = np.linalg.norm(rel, axis=1)
    if (dist < 1e-9).any():
        raise ValueError("degenerate view direction")
    return dist, rel / dist[:, None]


# -- feature-bank blending ----------------------------------------------------------


@dataclass
class FeatureBankNet:
    """Small MLP mapping (delta, direction) to 3 softmax logits that blend
    the multi-resolution feature bank."""

    w1: Tensor  # [4, hidden]
    b1: Tensor  # [hidden]
    w2: Tensor  # [hidden, 3]
    b2: Tensor  # [3]

    @classmethod
    def create(cls, rng: np.random.Generator, hidden: int = 8) -> "FeatureBankNet":
        lim1, lim2 = 1.0 / np.sqrt(4.0), 1.0 / np.sqrt(hidden)
        return cls(
            w1=T.parameter(rng.uniform(-lim1, lim1, size=(4, hidden))),
            b1=T.parameter(rng.uniform(-lim1, lim1, size=hidden)),
            w2=T.parameter(rng.uniform(-lim2, lim2, size=(hidden, 3))),
            b2=T.parameter(rng.uniform(-lim2, lim2, size=3)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"bank.w1": self.w1, "bank.b1": self.b1, "bank.w2": self.w2, "bank.b2": self.b2}

    def logits(self, ctx: Tensor) -> Tensor:
        """ctx: [N,4] rows of (delta, direction); returns [N,3]."""
        return T.tanh(ctx @ self.w1 + self.b1) @ self.w2 + self.b2

    def weights(self, ctx: Tensor) -> Tensor:
        return T.softmax(self.logits(ctx), axis=1)


def blend_features(features: Tensor, weights: Tensor) -> Tensor:
    """Blend each anchor's feature bank with its simplex weights.

    features: [N, FEATURE_DIM]; weights: [N, 3] ordered (full, down1, down2).
    """
    n, d = features.shape
    down1 = T.take(features, np.tile(np.arange(0, d, 2), 2), axis=1)
    down2 = T.take(features, np.tile(np.arange(0, d, 4), 4), axis=1)
    return (
        features * weights[:, 0:1]
        + down1 * weights[:, 1:2]
        + down2 * weights[:, 2:3]
    )


def blend_feature_bank(anchor: Anchor, ctx: ViewContext, weight_net: FeatureBankNet) -> np.ndarray:
    """Blended anchor feature for one view (contract-level wrapper)."""
    with no_grad():
        ctx_row = Tensor(np.concatenate([[ctx.distance], ctx.direction])[None, :])
        w = weight_net.weights(ctx_row)
        out = blend_features(Tensor(anchor.feature[None, :]), w)
    return out.data[0]


# -- gaussian geometry -----------------------------------------------------------------

SCALE_SQ_FLOOR = 1e-8  # clamp on s^2 keeps composed covariances invertible


def decode_positions(anchor: Anchor) -> np.ndarray:
    """Means of the k Gaussians: position + offset * scale (componentwise)."""
    return anchor.position + anchor.offsets * anchor.scale


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """3x3 rotation from a (w,x,y,z) quaternion, normalized internally."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if norm == 0.0:
        raise ValueError("degenerate rotation")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def compose_covariance(s: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sigma = R diag(s^2) R^T with a small floor on s^2."""
    s = np.asarray(s, dtype=np.float64).reshape(3)
    rot = rotation_from_quaternion(q)
    s2 = np.maximum(s * s, SCALE_SQ_FLOOR)
    return (rot * s2) @ rot.T


@dataclass
class NeuralGaussian:
    """A render-time Gaussian decoded from an anchor for one view."""

    mean: np.ndarray  # [3]
    opacity: float  # in (-1,1) pre-filter
    color: np.ndarray  # [3] in [0,1]
    scale: np.ndarray  # [3] positive
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)

    @property
    def covariance(self) -> np.ndarray:
        return compose_covariance(self.scale, self.rotation)


def gaussian_density(x: np.ndarray, g: NeuralGaussian) -> float:
    """exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)); requires well-conditioned Sigma."""
    cov = g.covariance
    if np.linalg.cond(cov) >= 1e12:
        raise ValueError("singular covariance")
    d = np.asarray(x, dtype=np.float64).reshape(3) - g.mean
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))
