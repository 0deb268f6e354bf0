"""Per-view assembly of the full pipeline: visible anchors -> blended
features -> attribute heads -> projected, composited image.

All trainable state (anchor features, offsets, log scales, and every head
parameter) lives here as uniquely named tape tensors.  Ablation switches
swap a head for a plain linear map of the same input/output shape, so the
decode interface is identical with or without the attention and spline
machinery.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hgsa
from . import tensor as T
from .kan import CovarianceHead, OpacityHead, decode_scale_rotation
from .losses import LossWeights, NlpdParams, total_core
from .rasterize import NEAR_PLANE, frustum_keep, project_gaussians, rasterize_tensors
from .scene import (
    FEATURE_DIM,
    Anchor,
    Camera,
    FeatureBankNet,
    blend_features,
    view_context_arrays,
)
from .tensor import Tensor


@dataclass
class AblationFlags:
    """Component-removal switches; each is independently toggleable."""

    disable_nlpd: bool = False
    disable_hgsa: bool = False
    disable_kan_cov: bool = False
    disable_kan_op: bool = False


def rotation_matrices(quats: Tensor) -> Tensor:
    """[M,4] unit (w,x,y,z) quaternions -> [M,3,3] rotation matrices."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    row0 = T.stack(
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        axis=1,
    )
    row1 = T.stack(
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        axis=1,
    )
    row2 = T.stack(
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        axis=1,
    )
    return T.stack([row0, row1, row2], axis=1)


# -- color heads ------------------------------------------------------------------


@dataclass
class HgsaColorHead:
    """Granular gating -> structural attention -> per-Gaussian colors."""

    granular: hgsa.GranularParams
    structural: hgsa.StructuralParams
    color: hgsa.ColorHeadParams

    @classmethod
    def create(cls, k: int, rng: np.random.Generator) -> "HgsaColorHead":
        return cls(
            granular=hgsa.GranularParams.create(rng),
            structural=hgsa.StructuralParams.create(rng),
            color=hgsa.ColorHeadParams.create(k, rng),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            **self.granular.parameters(),
            **self.structural.parameters(),
            **self.color.parameters(),
        }

    def forward(self, f_in: Tensor) -> Tensor:
        f_gra = hgsa.granular_attention(f_in, self.granular)
        return hgsa.color_head(hgsa.structural_attention(f_gra, self.structural), self.color)


@dataclass
class LinearColorHead:
    """Ablation stand-in for the attention chain: sigmoid(f_in W + b)."""

    weight: Tensor  # [36, 3k]
    bias: Tensor  # [3k]
    k: int

    @classmethod
    def create(cls, k: int, rng: np.random.Generator) -> "LinearColorHead":
        lim = 1.0 / np.sqrt(hgsa.FEATURE_COLS)
        return cls(
            weight=T.parameter(rng.uniform(-lim, lim, size=(hgsa.FEATURE_COLS, 3 * k))),
            bias=T.parameter(rng.uniform(-lim, lim, size=3 * k)),
            k=k,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"linear_color.weight": self.weight, "linear_color.bias": self.bias}

    def forward(self, f_in: Tensor) -> Tensor:
        n = f_in.shape[0]
        return T.sigmoid(f_in @ self.weight + self.bias).reshape(n, self.k, 3)


# -- linear opacity / covariance substitutes ----------------------------------------


@dataclass
class LinearOpacityHead:
    """Ablation stand-in for the spline opacity head: tanh(f_in W + b)."""

    weight: Tensor  # [36, k]
    bias: Tensor  # [k]
    tau: float = 0.0

    @classmethod
    def create(cls, k: int, rng: np.random.Generator, tau: float = 0.0) -> "LinearOpacityHead":
        lim = 1.0 / np.sqrt(hgsa.FEATURE_COLS)
        return cls(
            weight=T.parameter(rng.uniform(-lim, lim, size=(hgsa.FEATURE_COLS, k))),
            bias=T.parameter(rng.uniform(-lim, lim, size=k)),
            tau=tau,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"linear_opacity.weight": self.weight, "linear_opacity.bias": self.bias}

    def forward(self, f_in: Tensor) -> tuple[Tensor, np.ndarray]:
        alpha = T.tanh(f_in @ self.weight + self.bias)
        return alpha, alpha.data >= self.tau


@dataclass
class LinearCovarianceHead:
    """Ablation stand-in for the spline covariance head; shares the
    sigmoid-scale / normalized-quaternion decode with the spline version."""

    weight: Tensor  # [36, 7k]
    bias: Tensor  # [7k]
    k: int
    fallback_count: int = 0

    @classmethod
    def create(cls, k: int, rng: np.random.Generator) -> "LinearCovarianceHead":
        lim = 1.0 / np.sqrt(hgsa.FEATURE_COLS)
        return cls(
            weight=T.parameter(rng.uniform(-lim, lim, size=(hgsa.FEATURE_COLS, 7 * k))),
            bias=T.parameter(rng.uniform(-lim, lim, size=7 * k)),
            k=k,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "linear_covariance.weight": self.weight,
            "linear_covariance.bias": self.bias,
        }

    def forward(self, f_in: Tensor, base_scale: Tensor) -> tuple[Tensor, Tensor]:
        n = f_in.shape[0]
        raw = (f_in @ self.weight + self.bias).reshape(n, self.k, 7)
        scales, quats, fallbacks = decode_scale_rotation(raw, base_scale)
        self.fallback_count += fallbacks
        return scales, quats


# -- per-view decode --------------------------------------------------------------


@dataclass
class ViewGaussians:
    """Screen-space splat tensors for one camera, after opacity masking and
    frustum culling.

    ``scales`` holds the decoded world scales of every opacity-retained
    Gaussian (before geometric culling); it feeds the volume regularizer so
    that term does not jump when a splat crosses the frustum boundary.
    """

    mean2: Tensor  # [M,2]
    cov_abc: Tensor  # [M,3]
    alpha: Tensor  # [M]
    colors: Tensor  # [M,3]
    depth: np.ndarray  # [M]
    scales: Tensor  # [R,3]
    anchor_indices: np.ndarray  # anchors feeding attention for this view
    retained: int  # Gaussians passing the opacity threshold

    @property
    def count(self) -> int:
        return int(self.depth.shape[0])


def _empty_view(vis: np.ndarray, scales: Tensor | None, retained: int) -> ViewGaussians:
    return ViewGaussians(
        mean2=Tensor(np.zeros((0, 2))),
        cov_abc=Tensor(np.zeros((0, 3))),
        alpha=Tensor(np.zeros(0)),
        colors=Tensor(np.zeros((0, 3))),
        depth=np.zeros(0),
        scales=scales if scales is not None else Tensor(np.zeros((0, 3))),
        anchor_indices=vis,
        retained=retained,
    )


@dataclass
class SplatModel:
    """Anchor state plus heads; decodes and rasterizes one view at a time."""

    positions: np.ndarray  # [A,3] fixed voxel centers
    features: Tensor  # [A,32]
    offsets: Tensor  # [A,k,3]
    log_scales: Tensor  # [A,3]; anchor scale l_v = exp(log_scales)
    bank_net: FeatureBankNet
    color_head: HgsaColorHead | LinearColorHead
    opacity_head: OpacityHead | LinearOpacityHead
    covariance_head: CovarianceHead | LinearCovarianceHead
    flags: AblationFlags

    @classmethod
    def create(
        cls,
        anchors: list[Anchor],
        rng: np.random.Generator,
        tau_alpha: float = 0.0,
        flags: AblationFlags | None = None,
        kan_hidden: int = 16,
    ) -> "SplatModel":
        if not anchors:
            raise ValueError("empty anchor list")
        flags = flags if flags is not None else AblationFlags()
        k = anchors[0].k
        if any(a.k != k for a in anchors):
            raise ValueError("anchors disagree on offset count")
        color_head: HgsaColorHead | LinearColorHead
        opacity_head: OpacityHead | LinearOpacityHead
        covariance_head: CovarianceHead | LinearCovarianceHead
        bank_net = FeatureBankNet.create(rng)
        if flags.disable_hgsa:
            color_head = LinearColorHead.create(k, rng)
        else:
            color_head = HgsaColorHead.create(k, rng)
        if flags.disable_kan_op:
            opacity_head = LinearOpacityHead.create(k, rng, tau=tau_alpha)
        else:
            opacity_head = OpacityHead.create(k, rng, tau=tau_alpha, hidden=kan_hidden)
        if flags.disable_kan_cov:
            covariance_head = LinearCovarianceHead.create(k, rng)
        else:
            covariance_head = CovarianceHead.create(k, rng, hidden=kan_hidden)
        return cls(
            positions=np.stack([a.position for a in anchors]),
            features=T.parameter(np.stack([a.feature for a in anchors])),
            offsets=T.parameter(np.stack([a.offsets for a in anchors])),
            log_scales=T.parameter(np.log(np.stack([a.scale for a in anchors]))),
            bank_net=bank_net,
            color_head=color_head,
            opacity_head=opacity_head,
            covariance_head=covariance_head,
            flags=flags,
        )

    @property
    def anchor_count(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.offsets.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "anchors.features": self.features,
            "anchors.offsets": self.offsets,
            "anchors.log_scales": self.log_scales,
        }
        params.update(self.bank_net.parameters())
        params.update(self.color_head.parameters())
        params.update(self.opacity_head.parameters())
        params.update(self.covariance_head.parameters())
        return params

    def visible_anchors(self, camera: Camera) -> np.ndarray:
        """Indices of anchors in front of the near plane: the attention
        sequence for this view.  Visibility depends only on fixed anchor
        positions, so it cannot flip under parameter perturbations."""
        depth = camera.world_to_camera(self.positions)[:, 2]
        return np.flatnonzero(depth > NEAR_PLANE)

    def decode_view(self, camera: Camera) -> ViewGaussians:
        vis = self.visible_anchors(camera)
        n, k = int(vis.size), self.k
        if n == 0:
            return _empty_view(vis, None, 0)
        dist, dirs = view_context_arrays(self.positions[vis], camera)
        ctx = Tensor(np.concatenate([dist[:, None], dirs], axis=1))  # [N,4]

        feats = T.take(self.features, vis, axis=0)
        f_hat = blend_features(feats, self.bank_net.weights(ctx))
        f_in = T.concat([ctx, f_hat], axis=1)  # rows (delta, direction, feature)

        colors = self.color_head.forward(f_in)  # [N,k,3]
        alpha, mask = self.opacity_head.forward(f_in)  # [N,k]
        base_scale = T.exp(T.take(self.log_scales, vis, axis=0))  # [N,3]
        scales, quats = self.covariance_head.forward(f_in, base_scale)
        offsets = T.take(self.offsets, vis, axis=0)
        means = Tensor(self.positions[vis][:, None, :]) + offsets * base_scale.reshape(
            n, 1, 3
        )

        keep = np.flatnonzero(mask.ravel())
        if keep.size == 0:
            return _empty_view(vis, None, 0)
        means_r = T.take(means.reshape(n * k, 3), keep, axis=0)
        scales_r = T.take(scales.reshape(n * k, 3), keep, axis=0)
        quats_r = T.take(quats.reshape(n * k, 4), keep, axis=0)
        alpha_r = T.take(alpha.reshape(n * k), keep, axis=0)
        colors_r = T.take(colors.reshape(n * k, 3), keep, axis=0)

        # Depth pre-cull keeps 1/z in the projection finite; the screen-extent
        # test then culls on the projected footprint.
        cam_z = camera.world_to_camera(means_r.data)[:, 2]
        front = np.flatnonzero(cam_z > NEAR_PLANE)
        if front.size == 0:
            return _empty_view(vis, scales_r, int(keep.size))
        mean2, cov_abc, depth = project_gaussians(
            T.take(means_r, front, axis=0),
            rotation_matrices(T.take(quats_r, front, axis=0)),
            T.take(scales_r, front, axis=0),
            camera,
        )
        idx = np.flatnonzero(
            frustum_keep(mean2.data, cov_abc.data, depth, camera.width, camera.height)
        )
        sel = front[idx]
        return ViewGaussians(
            mean2=T.take(mean2, idx, axis=0),
            cov_abc=T.take(cov_abc, idx, axis=0),
            alpha=T.take(alpha_r, sel, axis=0),
            colors=T.take(colors_r, sel, axis=0),
            depth=depth[idx].copy(),
            scales=scales_r,
            anchor_indices=vis,
            retained=int(keep.size),
        )

    def rasterize_view(
        self, vg: ViewGaussians, camera: Camera, background: np.ndarray | None = None
    ) -> Tensor:
        bg = (
            np.zeros(3)
            if background is None
            else np.asarray(background, dtype=np.float64).reshape(3)
        )
        if vg.count == 0:
            return Tensor(np.tile(bg, (camera.height, camera.width, 1)))
        return rasterize_tensors(
            vg.mean2,
            vg.cov_abc,
            vg.alpha,
            vg.colors,
            vg.depth,
            camera.width,
            camera.height,
            bg,
        )

    def render_view(self, camera: Camera, background: np.ndarray | None = None) -> Tensor:
        return self.rasterize_view(self.decode_view(camera), camera, background)

    def loss_view(
        self,
        camera: Camera,
        gt: np.ndarray,
        weights: LossWeights,
        background: np.ndarray | None = None,
        pyramid_depth: int | None = None,
        nlpd_params: NlpdParams | None = None,
        use_l1: bool = False,
    ) -> tuple[Tensor, dict[str, float], Tensor]:
        """Total objective against a [H,W,3] ground truth; returns the loss,
        the logged component values, and the rendered [H,W,3] image."""
        vg = self.decode_view(camera)
        img = self.rasterize_view(vg, camera, background)
        render = T.transpose(img, 2, 0, 1)
        target = Tensor(np.moveaxis(np.asarray(gt, dtype=np.float64), 2, 0))
        loss, parts = total_core(
            render,
            target,
            vg.scales,
            weights,
            pyramid_depth=pyramid_depth,
            nlpd_params=nlpd_params,
            use_l1=use_l1,
        )
        return loss, parts, img


def blank_model(
    positions: np.ndarray,
    k: int,
    tau_alpha: float = 0.0,
    flags: AblationFlags | None = None,
    kan_hidden: int = 16,
) -> SplatModel:
    """Model with every parameter allocated at the right shape for the given
    anchor layout; checkpoint loading overwrites the values."""
    anchors = [
        Anchor(position=p, feature=np.zeros(FEATURE_DIM), scale=np.ones(3), offsets=np.zeros((k, 3)))
        for p in np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ]
    return SplatModel.create(
        anchors, np.random.default_rng(0), tau_alpha=tau_alpha, flags=flags, kan_hidden=kan_hidden
    )
