"""The training objective and evaluation metrics.

The total loss combines mean-squared error, structural dissimilarity, a
Gaussian-volume regularizer, and a multi-scale perceptual distance over
divisively normalized Laplacian-pyramid residuals, grouped as

    ((1-w_d)*L2 + w_d*DSSIM + w_v*Vol) * (1-w_n) + w_n*NLPD.

Every component has a differentiable core over [C,H,W] tensors plus a
float-returning wrapper for plain arrays / image buffers.  The perceptual
evaluation metric here is the pyramid distance itself (no pretrained
network is involved); reports note this substitution explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .image import ImageBuffer
from .tensor import Tensor, no_grad

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
_BOX3 = np.array([1.0, 1.0, 1.0]) / 3.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    """Mixing weights; the perceptual weight must stay below 1 or the base
    reconstruction term would vanish from the objective."""

    lambda_dssim: float = 0.2
    lambda_vol: float = 0.01
    lambda_nlpd: float = 0.2

    def __post_init__(self):
        for name in ("lambda_dssim", "lambda_vol", "lambda_nlpd"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if self.lambda_nlpd >= 1.0:
            raise ValueError("lambda_nlpd must be < 1")


@dataclass
class NlpdParams:
    """Divisive-normalization constants: per-scale noise floor and the
    fixed 3x3 box filter applied to residual magnitudes."""

    sigma: float = 0.1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass
class LaplacianPyramid:
    """Residual bands 0..k-2 plus the lowpass band k-1."""

    bands: list[np.ndarray] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.bands)


# -- shape plumbing -----------------------------------------------------------


def _to_chw(img) -> np.ndarray:
    """ImageBuffer | [H,W,3] | [H,W] -> float64 [C,H,W]."""
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        return data[None, :, :]
    if data.ndim == 3:
        return np.moveaxis(data, 2, 0)
    raise ValueError("expected a [H,W] plane or [H,W,3] image")


def _pair_chw(render, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = _to_chw(render), _to_chw(gt)
    if a.shape != b.shape:
        raise ValueError(f"image dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


# -- separable filtering with reflect padding -----------------------------------


@lru_cache(maxsize=None)
def _reflect_indices(n: int, pad: int) -> np.ndarray:
    """Bounce-reflection index map for positions [-pad, n+pad); valid for
    any n >= 1 (n == 1 degenerates to constant extension)."""
    if n == 1:
        return np.zeros(n + 2 * pad, dtype=np.int64)
    idx = np.abs(np.arange(-pad, n + pad)) % (2 * (n - 1))
    return np.where(idx >= n, 2 * (n - 1) - idx, idx)


def _filter_axis(x: Tensor, taps: np.ndarray, axis: int) -> Tensor:
    """Correlate along one of the last two axes with reflect padding.

    Fused into a single tape op: the filter runs hundreds of times per loss
    evaluation, so per-op overhead would dominate a composed version."""
    size = x.shape[axis]
    pad = len(taps) // 2
    ridx = _reflect_indices(size, pad)
    ax = axis % x.ndim
    head = (slice(None),) * ax
    xp = np.take(x.data, ridx, axis=ax)
    out = xp[head + (slice(0, size),)] * taps[0]
    for t in range(1, len(taps)):
        out += xp[head + (slice(t, t + size),)] * taps[t]

    def vjp(g):
        gp = np.zeros(xp.shape)
        for t, tap in enumerate(taps):
            gp[head + (slice(t, t + size),)] += g * tap
        gx = np.zeros(x.shape)
        np.add.at(gx, head + (ridx,), gp)
        return (gx,)

    return T.custom_op(out, (x,), vjp)


def _blur2(x: Tensor, taps: np.ndarray) -> Tensor:
    return _filter_axis(_filter_axis(x, taps, -2), taps, -1)


def _downsample(x: Tensor) -> Tensor:
    return _blur2(x, _BINOMIAL5)[..., ::2, ::2]


def _upsample(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    # Zero insertion followed by the gain-2 kernel restores the DC level.
    return _blur2(T.upsample_zeros(x, out_hw), 2.0 * _BINOMIAL5)


# -- laplacian pyramid -----------------------------------------------------------


def _check_pyramid_depth(h: int, w: int, k: int) -> None:
    if k < 1 or min(h, w) < 2 ** (k - 1):
        raise ValueError("image too small for pyramid depth")


def default_pyramid_depth(h: int, w: int) -> int:
    return max(1, min(5, min(h, w).bit_length() - 1))


def pyramid_bands(x: Tensor, k: int) -> list[Tensor]:
    """Residual bands of x ([..., H, W]): band_i = level_i - up(level_{i+1}),
    with the coarsest lowpass level as the final band."""
    _check_pyramid_depth(x.shape[-2], x.shape[-1], k)
    levels = [x]
    for _ in range(k - 1):
        levels.append(_downsample(levels[-1]))
    bands = [
        levels[i] - _upsample(levels[i + 1], levels[i].shape[-2:])
        for i in range(k - 1)
    ]
    bands.append(levels[-1])
    return bands


def build_pyramid(img: np.ndarray, k: int) -> LaplacianPyramid:
    """Decompose a single-channel plane into k bands."""
    plane = np.asarray(img, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError("expected a single-channel [H,W] plane")
    with no_grad():
        bands = pyramid_bands(Tensor(plane), k)
    return LaplacianPyramid(bands=[b.data for b in bands])


def collapse_pyramid(pyr: LaplacianPyramid) -> np.ndarray:
    """Exact inverse of build_pyramid (up to float rounding)."""
    with no_grad():
        cur = Tensor(pyr.bands[-1])
        for band in reversed(pyr.bands[:-1]):
            cur = Tensor(band) + _upsample(cur, band.shape[-2:])
    return cur.data


# -- loss cores (differentiable) ----------------------------------------------------


def l2_core(x: Tensor, y: Tensor) -> Tensor:
    d = x - y
    return (d * d).mean()


def l1_core(x: Tensor, y: Tensor) -> Tensor:
    return T.absolute(x - y).mean()


def dssim_core(x: Tensor, y: Tensor) -> Tensor:
    """(1 - SSIM)/2 with an 11x11 Gaussian window over valid positions."""
    h, w = x.shape[-2], x.shape[-1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError("image smaller than SSIM window")
    offsets = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2.0
    taps = np.exp(-0.5 * (offsets / SSIM_SIGMA) ** 2)
    taps /= taps.sum()

    def win(t: Tensor) -> Tensor:  # valid-mode separable window average
        for axis in (-2, -1):
            size = t.shape[axis] - SSIM_WINDOW + 1
            pieces = []
            for j, tap in enumerate(taps):
                key = [slice(None)] * t.ndim
                key[axis] = slice(j, j + size)
                pieces.append(t[tuple(key)] * tap)
            acc = pieces[0]
            for p in pieces[1:]:
                acc = acc + p
            t = acc
        return t

    mu_x, mu_y = win(x), win(y)
    var_x = win(x * x) - mu_x * mu_x
    var_y = win(y * y) - mu_y * mu_y
    cov = win(x * y) - mu_x * mu_y
    ssim_map = ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)) / (
        (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
    )
    return (1.0 - ssim_map.mean()) * 0.5


def volume_core(scales: Tensor) -> Tensor:
    """Sum of per-Gaussian scale products; scales: [M,3]."""
    return (scales[:, 0] * scales[:, 1] * scales[:, 2]).sum()


def nlpd_core(x: Tensor, y: Tensor, k: int, params: NlpdParams) -> Tensor:
    """Distance between divisively normalized pyramid residuals.

    Per band: R_norm = R / (sigma + box3(|R|)); the loss averages, over
    channels, (1/k) * sum_i rms(R_norm_x - R_norm_y) per band.
    """

    def normalized(t: Tensor) -> Tensor:
        return t / (params.sigma + _blur2(T.absolute(t), _BOX3))

    bands_x = pyramid_bands(x, k)
    bands_y = pyramid_bands(y, k)
    per_band = []
    for bx, by in zip(bands_x, bands_y):
        d = normalized(bx) - normalized(by)
        per_band.append(T.sqrt((d * d).mean(axis=(-2, -1))))  # [C]
    total = per_band[0]
    for term in per_band[1:]:
        total = total + term
    return (total * (1.0 / k)).mean()


def total_core(
    render: Tensor,
    gt: Tensor,
    scales: Tensor | None,
    weights: LossWeights,
    pyramid_depth: int | None = None,
    nlpd_params: NlpdParams | None = None,
    use_l1: bool = False,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted objective; zero-weighted components are skipped entirely
    (their logged value is 0).  Returns (loss, component values).

    ``use_l1`` swaps the reconstruction term to mean absolute error (the
    component still logs under the "l2" key so report columns stay fixed).
    """
    parts = {"l2": 0.0, "dssim": 0.0, "vol": 0.0, "nlpd": 0.0}
    l2 = l1_core(render, gt) if use_l1 else l2_core(render, gt)
    parts["l2"] = float(l2.data)
    base = (1.0 - weights.lambda_dssim) * l2
    if weights.lambda_dssim != 0.0:
        dssim = dssim_core(render, gt)
        parts["dssim"] = float(dssim.data)
        base = base + weights.lambda_dssim * dssim
    if weights.lambda_vol != 0.0 and scales is not None and scales.shape[0] > 0:
        vol = volume_core(scales)
        parts["vol"] = float(vol.data)
        base = base + weights.lambda_vol * vol
    loss = base * (1.0 - weights.lambda_nlpd)
    if weights.lambda_nlpd != 0.0:
        k = pyramid_depth or default_pyramid_depth(render.shape[-2], render.shape[-1])
        nlpd = nlpd_core(render, gt, k, nlpd_params or NlpdParams())
        parts["nlpd"] = float(nlpd.data)
        loss = loss + weights.lambda_nlpd * nlpd
    return loss, parts


# -- float wrappers -------------------------------------------------------------------


def l2_loss(render, gt) -> float:
    a, b = _pair_chw(render, gt)
    with no_grad():
        return float(l2_core(Tensor(a), Tensor(b)).data)


def l1_loss(render, gt) -> float:
    a, b = _pair_chw(render, gt)
    with no_grad():
        return float(l1_core(Tensor(a), Tensor(b)).data)


def dssim_loss(render, gt) -> float:
    a, b = _pair_chw(render, gt)
    with no_grad():
        return float(dssim_core(Tensor(a), Tensor(b)).data)


def ssim(render, gt) -> float:
    return 1.0 - 2.0 * dssim_loss(render, gt)


def volume_loss(scales) -> float:
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    with no_grad():
        return float(volume_core(Tensor(s)).data)


def nlpd_loss(render, gt, params: NlpdParams | None = None, k: int | None = None) -> float:
    a, b = _pair_chw(render, gt)
    if k is None:
        k = default_pyramid_depth(a.shape[-2], a.shape[-1])
    with no_grad():
        return float(nlpd_core(Tensor(a), Tensor(b), k, params or NlpdParams()).data)


def total_loss(render, gt, scales, weights: LossWeights, use_l1: bool = False) -> float:
    a, b = _pair_chw(render, gt)
    s = None
    if scales is not None:
        s = Tensor(np.asarray(scales, dtype=np.float64).reshape(-1, 3))
    with no_grad():
        loss, _ = total_core(Tensor(a), Tensor(b), s, weights, use_l1=use_l1)
    return float(loss.data)


def psnr(render, gt) -> float:
    """-10*log10(MSE) for [0,1]-ranged images, capped at 100 dB."""
    a, b = _pair_chw(render, gt)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return -10.0 * np.log10(mse)
