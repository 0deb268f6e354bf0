"""Projection of 3D Gaussians to screen space and tile-based front-to-back
alpha compositing, differentiable end to end.

The tiled compositor and the naive per-pixel reference loop are kept
bit-identical: both evaluate the same inclusion predicate (|center - mean|
within the 3-sigma box), composite splats in the same stable depth order,
and perform textually identical arithmetic -- elementwise numpy float64 ops
match Python-float scalar ops lanewise, and scalar np.exp matches the
vectorized ufunc (asserted in the test suite).  The backward pass reruns
each tile forward, then walks it back-to-front with a suffix-color
accumulator, which avoids dividing by (1 - alpha*G).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .image import ImageBuffer
from .scene import Camera, NeuralGaussian, rotation_from_quaternion
from .tensor import Tensor

TILE = 16
NEAR_PLANE = 0.01
LOWPASS = 0.3  # added to both eigenvalues of the projected covariance
STOP_T = 1e-4  # per-pixel early-termination threshold on transmittance
CULL_SIGMA = 3.035  # ~99% mass extent used for frustum culling
BBOX_SIGMA = 3.0  # per-pixel evaluation footprint


@dataclass
class SplattedGaussian:
    """A screen-space Gaussian ready for compositing."""

    mean: np.ndarray  # [2] pixels
    cov: np.ndarray  # [2,2] symmetric, eigenvalues >= LOWPASS
    depth: float  # camera-space z, > NEAR_PLANE
    alpha: float
    color: np.ndarray  # [3]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(2)
        self.cov = np.asarray(self.cov, dtype=np.float64).reshape(2, 2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


# -- projection -------------------------------------------------------------------


def project_gaussians(
    means: Tensor, rotations: Tensor, scales: Tensor, camera: Camera
) -> tuple[Tensor, Tensor, np.ndarray]:
    """EWA first-order projection of a batch of Gaussians.

    means: [M,3]; rotations: [M,3,3]; scales: [M,3] (already floored).
    Returns screen means [M,2], covariance triples (a, b, c) [M,3] for
    [[a,b],[b,c]] with the low-pass floor added, and camera depths [M].
    """
    w_rot = camera.rotation
    cam_pts = means @ Tensor(w_rot.T) + Tensor(camera.translation)
    tx, ty, tz = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]
    inv_z = 1.0 / tz
    mean2 = T.stack(
        [camera.fx * tx * inv_z + camera.cx, camera.fy * ty * inv_z + camera.cy],
        axis=1,
    )

    m = means.shape[0]
    # Rows of J @ W without materializing J: fx/z * W_0 - fx*x/z^2 * W_2, etc.
    fx_iz = (camera.fx * inv_z).reshape(m, 1)
    fy_iz = (camera.fy * inv_z).reshape(m, 1)
    fx_xzz = (camera.fx * tx * inv_z * inv_z).reshape(m, 1)
    fy_yzz = (camera.fy * ty * inv_z * inv_z).reshape(m, 1)
    row0 = fx_iz * Tensor(w_rot[0]) - fx_xzz * Tensor(w_rot[2])
    row1 = fy_iz * Tensor(w_rot[1]) - fy_yzz * Tensor(w_rot[2])
    jw = T.stack([row0, row1], axis=1)  # [M,2,3]

    half = jw @ (rotations * scales.reshape(m, 1, 3))  # J W R diag(s): [M,2,3]
    a = (half[:, 0, :] * half[:, 0, :]).sum(axis=1) + LOWPASS
    b = (half[:, 0, :] * half[:, 1, :]).sum(axis=1)
    c = (half[:, 1, :] * half[:, 1, :]).sum(axis=1) + LOWPASS
    cov_abc = T.stack([a, b, c], axis=1)
    return mean2, cov_abc, tz.data.copy()


def frustum_keep(
    mean2: np.ndarray, cov_abc: np.ndarray, depth: np.ndarray, width: int, height: int
) -> np.ndarray:
    """Splats to keep: in front of the near plane with their ~99% extent
    touching the frame."""
    rx = CULL_SIGMA * np.sqrt(cov_abc[:, 0])
    ry = CULL_SIGMA * np.sqrt(cov_abc[:, 2])
    inside = (
        (mean2[:, 0] + rx > 0.0)
        & (mean2[:, 0] - rx < float(width))
        & (mean2[:, 1] + ry > 0.0)
        & (mean2[:, 1] - ry < float(height))
    )
    return (depth > NEAR_PLANE) & inside


def project(g: NeuralGaussian, camera: Camera) -> SplattedGaussian | None:
    """Project one Gaussian; returns None when culled."""
    with T.no_grad():
        rot = rotation_from_quaternion(g.rotation)
        s = np.maximum(g.scale, 1e-4)  # same floor as covariance composition
        mean2, cov_abc, depth = project_gaussians(
            Tensor(g.mean[None]), Tensor(rot[None]), Tensor(s[None]), camera
        )
    m2, abc, z = mean2.data[0], cov_abc.data[0], float(depth[0])
    if not frustum_keep(mean2.data, cov_abc.data, depth, camera.width, camera.height)[0]:
        return None
    return SplattedGaussian(
        mean=m2,
        cov=np.array([[abc[0], abc[1]], [abc[1], abc[2]]]),
        depth=z,
        alpha=g.opacity,
        color=g.color,
    )


# -- shared compositing plumbing -------------------------------------------------------


def _splat_footprints(mean2: np.ndarray, cov_abc: np.ndarray):
    """Per-splat inverse covariances and 3-sigma radii (vectorized)."""
    a, b, c = cov_abc[:, 0], cov_abc[:, 1], cov_abc[:, 2]
    det = a * c - b * b
    inv_a = c / det
    inv_b = -b / det
    inv_c = a / det
    rx = BBOX_SIGMA * np.sqrt(a)
    ry = BBOX_SIGMA * np.sqrt(c)
    return inv_a, inv_b, inv_c, rx, ry


def _sorted_order(depth: np.ndarray) -> np.ndarray:
    """Depth-ascending order, stable so ties keep insertion order."""
    return np.argsort(depth, kind="stable")


def _tile_lists(
    mean2: np.ndarray, rx: np.ndarray, ry: np.ndarray, width: int, height: int
) -> list[list[int]]:
    """Conservative splat lists per 16x16 tile, in the given (sorted) splat
    order.  A one-pixel safety margin guarantees the exact per-pixel
    predicate never selects a pixel outside the binned tiles."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    lists: list[list[int]] = [[] for _ in range(ntx * nty)]
    x0 = np.floor(mean2[:, 0] - rx - 0.5).astype(np.int64) - 1
    x1 = np.ceil(mean2[:, 0] + rx - 0.5).astype(np.int64) + 1
    y0 = np.floor(mean2[:, 1] - ry - 0.5).astype(np.int64) - 1
    y1 = np.ceil(mean2[:, 1] + ry - 0.5).astype(np.int64) + 1
    for i in range(mean2.shape[0]):
        tx0, tx1 = max(0, x0[i] // TILE), min(ntx - 1, x1[i] // TILE)
        ty0, ty1 = max(0, y0[i] // TILE), min(nty - 1, y1[i] // TILE)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                lists[ty * ntx + tx].append(i)
    return lists


# -- tiled forward ----------------------------------------------------------------------


def composite_tiled(
    mean2: np.ndarray,
    cov_abc: np.ndarray,
    alpha: np.ndarray,
    colors: np.ndarray,
    width: int,
    height: int,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Front-to-back compositing of depth-sorted splats.

    Returns (image [H,W,3], final transmittance [H,W], accumulated weight
    [H,W]); image excludes clamping so callers can clip at the edge.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    img = np.empty((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    acc = np.zeros((height, width), dtype=np.float64)
    if mean2.shape[0] == 0:
        img[:] = background
        return img, trans, acc

    alpha_eff = np.clip(alpha, 0.0, 1.0)
    inv_a, inv_b, inv_c, rx, ry = _splat_footprints(mean2, cov_abc)
    lists = _tile_lists(mean2, rx, ry, width, height)
    ntx = (width + TILE - 1) // TILE

    for tile_idx, splat_ids in enumerate(lists):
        ty, tx = divmod(tile_idx, ntx)
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
        pxs = np.tile(xs + 0.5, ys.size)
        pys = np.repeat(ys + 0.5, xs.size)
        t_cur = np.ones(pxs.size, dtype=np.float64)
        c_cur = np.zeros((pxs.size, 3), dtype=np.float64)
        a_cur = np.zeros(pxs.size, dtype=np.float64)
        for i in splat_ids:
            live = t_cur >= STOP_T
            if not live.any():
                break
            dx = pxs - mean2[i, 0]
            dy = pys - mean2[i, 1]
            active = (np.abs(dx) <= rx[i]) & (np.abs(dy) <= ry[i]) & live
            q = inv_a[i] * dx * dx + 2.0 * inv_b[i] * dx * dy + inv_c[i] * dy * dy
            w = np.where(active, alpha_eff[i] * np.exp(-0.5 * q), 0.0)
            wt = w * t_cur
            c_cur += wt[:, None] * colors[i]
            a_cur += wt
            t_cur = t_cur * (1.0 - w)
        sl = (slice(ty * TILE, ty * TILE + ys.size), slice(tx * TILE, tx * TILE + xs.size))
        shape2 = (ys.size, xs.size)
        img[sl] = (c_cur + t_cur[:, None] * background).reshape(shape2 + (3,))
        trans[sl] = t_cur.reshape(shape2)
        acc[sl] = a_cur.reshape(shape2)
    return img, trans, acc


def composite_naive(
    mean2: np.ndarray,
    cov_abc: np.ndarray,
    alpha: np.ndarray,
    colors: np.ndarray,
    width: int,
    height: int,
    background: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reference per-pixel full loop over depth-sorted splats (scalar
    arithmetic; np.exp for the falloff so values match the ufunc bitwise)."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    img = np.empty((height, width, 3), dtype=np.float64)
    trans = np.ones((height, width), dtype=np.float64)
    acc = np.zeros((height, width), dtype=np.float64)
    n = mean2.shape[0]
    alpha_eff = np.clip(alpha, 0.0, 1.0)
    inv_a, inv_b, inv_c, rx, ry = _splat_footprints(mean2, cov_abc)
    for iy in range(height):
        py = iy + 0.5
        for ix in range(width):
            px = ix + 0.5
            t_cur = 1.0
            a_cur = 0.0
            cr = cg = cb = 0.0
            for i in range(n):
                if t_cur < STOP_T:
                    break
                dx = px - float(mean2[i, 0])
                dy = py - float(mean2[i, 1])
                if abs(dx) > float(rx[i]) or abs(dy) > float(ry[i]):
                    continue
                q = float(inv_a[i]) * dx * dx + 2.0 * float(inv_b[i]) * dx * dy + float(inv_c[i]) * dy * dy
                w = float(alpha_eff[i]) * np.exp(-0.5 * q)
                wt = w * t_cur
                cr += wt * float(colors[i, 0])
                cg += wt * float(colors[i, 1])
                cb += wt * float(colors[i, 2])
                a_cur += wt
                t_cur = t_cur * (1.0 - w)
            img[iy, ix, 0] = cr + t_cur * float(background[0])
            img[iy, ix, 1] = cg + t_cur * float(background[1])
            img[iy, ix, 2] = cb + t_cur * float(background[2])
            trans[iy, ix] = t_cur
            acc[iy, ix] = a_cur
    return img, trans, acc


# -- analytic backward --------------------------------------------------------------------


def composite_backward(
    mean2: np.ndarray,
    cov_abc: np.ndarray,
    alpha: np.ndarray,
    colors: np.ndarray,
    width: int,
    height: int,
    background: np.ndarray,
    grad_img: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the composited (unclamped) image w.r.t. depth-sorted
    splat parameters.

    The covariance gradient uses the triple convention: d/db is the
    derivative when both symmetric off-diagonal entries move together.
    Early-terminated and out-of-footprint pixels contribute exactly zero.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    n = mean2.shape[0]
    g_mean2 = np.zeros((n, 2))
    g_cov = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    g_colors = np.zeros((n, 3))
    if n == 0:
        return g_mean2, g_cov, g_alpha, g_colors

    alpha_eff = np.clip(alpha, 0.0, 1.0)
    alpha_gate = (alpha >= 0.0) & (alpha <= 1.0)  # clip pass-through
    inv_a, inv_b, inv_c, rx, ry = _splat_footprints(mean2, cov_abc)
    lists = _tile_lists(mean2, rx, ry, width, height)
    ntx = (width + TILE - 1) // TILE

    for tile_idx, splat_ids in enumerate(lists):
        if not splat_ids:
            continue
        ty, tx = divmod(tile_idx, ntx)
        xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
        ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
        pxs = np.tile(xs + 0.5, ys.size)
        pys = np.repeat(ys + 0.5, xs.size)
        g_out = grad_img[ys[0] : ys[0] + ys.size, xs[0] : xs[0] + xs.size].reshape(-1, 3)

        # Forward replay, recording per-splat state for the reverse walk.
        t_cur = np.ones(pxs.size)
        steps: list[tuple[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        for i in splat_ids:
            live = t_cur >= STOP_T
            if not live.any():
                break
            dx = pxs - mean2[i, 0]
            dy = pys - mean2[i, 1]
            active = (np.abs(dx) <= rx[i]) & (np.abs(dy) <= ry[i]) & live
            q = inv_a[i] * dx * dx + 2.0 * inv_b[i] * dx * dy + inv_c[i] * dy * dy
            gval = np.where(active, np.exp(-0.5 * q), 0.0)
            w = alpha_eff[i] * gval
            steps.append((i, t_cur, gval, dx, dy))
            t_cur = t_cur * (1.0 - w)

        # Reverse walk with the suffix-color accumulator B:
        # dC/dw_i = T_i (c_i - B_i),  B_{i-1} = c_i w_i + (1 - w_i) B_i.
        suffix = np.broadcast_to(background, (pxs.size, 3)).copy()
        for i, t_before, gval, dx, dy in reversed(steps):
            w = alpha_eff[i] * gval
            gw = t_before * ((colors[i] - suffix) * g_out).sum(axis=1)
            g_colors[i] += g_out.T @ (w * t_before)
            if alpha_gate[i]:
                g_alpha[i] += gw @ gval
            dgval = gw * alpha_eff[i]
            dq = dgval * gval * -0.5
            g_mean2[i, 0] += -(dq * (2.0 * inv_a[i] * dx + 2.0 * inv_b[i] * dy)).sum()
            g_mean2[i, 1] += -(dq * (2.0 * inv_c[i] * dy + 2.0 * inv_b[i] * dx)).sum()
            d_inv = np.array(
                [(dq * dx * dx).sum(), (dq * dx * dy).sum(), (dq * dy * dy).sum()]
            )
            # Through the 2x2 inverse: dM = -M^-1 dM^-1 M^-1 (all symmetric).
            minv = np.array([[inv_a[i], inv_b[i]], [inv_b[i], inv_c[i]]])
            g_minv = np.array([[d_inv[0], d_inv[1]], [d_inv[1], d_inv[2]]])
            p = minv @ g_minv @ minv
            g_cov[i] += np.array([-p[0, 0], -2.0 * p[0, 1], -p[1, 1]])
            suffix = colors[i] * w[:, None] + (1.0 - w[:, None]) * suffix
    return g_mean2, g_cov, g_alpha, g_colors


# -- tape integration ------------------------------------------------------------------------


def rasterize_tensors(
    mean2: Tensor,
    cov_abc: Tensor,
    alpha: Tensor,
    colors: Tensor,
    depth: np.ndarray,
    width: int,
    height: int,
    background: np.ndarray,
) -> Tensor:
    """Differentiable rasterization op: sorts by depth on the tape, runs the
    tiled compositor, and registers the analytic backward.  Returns the
    clamped [H,W,3] image tensor."""
    order = _sorted_order(depth)
    s_mean2 = T.take(mean2, order, axis=0)
    s_cov = T.take(cov_abc, order, axis=0)
    s_alpha = T.take(alpha, order, axis=0)
    s_colors = T.take(colors, order, axis=0)

    img, _, _ = composite_tiled(
        s_mean2.data, s_cov.data, s_alpha.data, s_colors.data, width, height, background
    )

    def vjp(g):
        return composite_backward(
            s_mean2.data,
            s_cov.data,
            s_alpha.data,
            s_colors.data,
            width,
            height,
            background,
            g,
        )

    raw = T.custom_op(img, (s_mean2, s_cov, s_alpha, s_colors), vjp)
    return T.clip(raw, 0.0, 1.0)


# -- list-of-splats contract surface -------------------------------------------------------------


def _splat_arrays(splats: list[SplattedGaussian]):
    if not splats:
        z = np.zeros
        return z((0, 2)), z((0, 3)), z(0), z((0, 3)), z(0)
    mean2 = np.stack([s.mean for s in splats])
    cov_abc = np.stack([[s.cov[0, 0], s.cov[0, 1], s.cov[1, 1]] for s in splats])
    alpha = np.array([s.alpha for s in splats], dtype=np.float64)
    colors = np.stack([s.color for s in splats])
    depth = np.array([s.depth for s in splats], dtype=np.float64)
    return mean2, cov_abc, alpha, colors, depth


def _validate_splats(splats: list[SplattedGaussian]) -> None:
    for s in splats:
        vals = np.concatenate([s.mean, s.cov.ravel(), [s.depth, s.alpha], s.color])
        if not np.isfinite(vals).all():
            raise ValueError("splat parameters must be finite")
        a, b, c = s.cov[0, 0], s.cov[0, 1], s.cov[1, 1]
        if abs(s.cov[1, 0] - b) > 1e-9:
            raise ValueError("splat covariance must be symmetric")
        eig_min = 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)
        if eig_min < LOWPASS - 1e-9:
            raise ValueError("splat covariance below the low-pass floor")


def rasterize(
    splats: list[SplattedGaussian], width: int, height: int, background
) -> ImageBuffer:
    """Composite splats (tiled path); sorted by depth, ties by insertion."""
    _validate_splats(splats)
    mean2, cov_abc, alpha, colors, depth = _splat_arrays(splats)
    order = _sorted_order(depth)
    img, trans, _ = composite_tiled(
        mean2[order], cov_abc[order], alpha[order], colors[order], width, height,
        np.asarray(background, dtype=np.float64),
    )
    return ImageBuffer(data=np.clip(img, 0.0, 1.0), transmittance=trans)


def naive_rasterize(
    splats: list[SplattedGaussian], width: int, height: int, background
) -> ImageBuffer:
    """Reference compositor with the same sorting and semantics."""
    _validate_splats(splats)
    mean2, cov_abc, alpha, colors, depth = _splat_arrays(splats)
    order = _sorted_order(depth)
    img, trans, _ = composite_naive(
        mean2[order], cov_abc[order], alpha[order], colors[order], width, height,
        np.asarray(background, dtype=np.float64),
    )
    return ImageBuffer(data=np.clip(img, 0.0, 1.0), transmittance=trans)


@dataclass
class SplatGradients:
    """Per-splat gradients in the input (unsorted) splat order.

    ``cov`` holds symmetric 2x2 matrix gradients: the off-diagonal cells
    each carry half the sensitivity of moving both entries together.
    """

    mean: np.ndarray  # [M,2]
    cov: np.ndarray  # [M,2,2]
    alpha: np.ndarray  # [M]
    color: np.ndarray  # [M,3]


def rasterize_backward(
    splats: list[SplattedGaussian],
    grad_image: np.ndarray,
    width: int,
    height: int,
    background,
) -> SplatGradients:
    """Analytic gradients of rasterize() w.r.t. every splat parameter."""
    _validate_splats(splats)
    mean2, cov_abc, alpha, colors, depth = _splat_arrays(splats)
    order = _sorted_order(depth)
    g_mean2, g_cov3, g_alpha, g_colors = composite_backward(
        mean2[order], cov_abc[order], alpha[order], colors[order], width, height,
        np.asarray(background, dtype=np.float64),
        np.asarray(grad_image, dtype=np.float64),
    )
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    g_mean2, g_cov3, g_alpha, g_colors = (
        g_mean2[inv], g_cov3[inv], g_alpha[inv], g_colors[inv],
    )
    cov_mats = np.zeros((len(splats), 2, 2))
    cov_mats[:, 0, 0] = g_cov3[:, 0]
    cov_mats[:, 0, 1] = cov_mats[:, 1, 0] = 0.5 * g_cov3[:, 1]
    cov_mats[:, 1, 1] = g_cov3[:, 2]
    return SplatGradients(mean=g_mean2, cov=cov_mats, alpha=g_alpha, color=g_colors)
