"""Spline-activation network layers and the opacity/covariance heads.

Each layer edge carries its own learnable univariate function
``phi(x) = w_b * silu(x) + w_s * sum_c coef_c * B_c(x)`` over a fixed
B-spline basis (uniform knots on [-1, 1], cubic by default); a layer output
is the sum of its edge activations.  The heads squash their 36-dim inputs
with tanh first so values land inside the spline grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad

GRID_SIZE = 5
SPLINE_ORDER = 3
GRID_RANGE = (-1.0, 1.0)


def make_knots(
    grid_size: int = GRID_SIZE,
    order: int = SPLINE_ORDER,
    lo: float = GRID_RANGE[0],
    hi: float = GRID_RANGE[1],
) -> np.ndarray:
    """Uniform knot vector with ``order`` extension knots on each side,
    giving ``grid_size + order`` basis functions."""
    h = (hi - lo) / grid_size
    return lo + h * np.arange(-order, grid_size + order + 1)


def spline_basis(x, knots: np.ndarray, order: int = SPLINE_ORDER) -> np.ndarray:
    """Cox-de Boor basis values at ``x`` (scalar or array); entries are
    nonnegative and sum to 1 inside the grid range.  Out-of-range inputs
    are clamped to the grid before evaluation."""
    if order < 1:
        raise ValueError("spline order must be >= 1")
    with no_grad():
        return _basis(Tensor(x), knots, order).data


def _basis(x: Tensor, knots: np.ndarray, order: int) -> Tensor:
    """Differentiable basis evaluation as one fused tape op; output shape =
    x.shape + (n_basis,).

    The backward uses the uniform-knot derivative B'_{i,d} =
    (B_{i,d-1} - B_{i+1,d-1})/h, gated where the grid clamp is inactive."""
    lo, hi = knots[order], knots[-order - 1]
    h = knots[1] - knots[0]
    xd = x.data
    xe = np.clip(xd, lo, hi)[..., None]
    b = ((xe >= knots[:-1]) & (xe < knots[1:])).astype(np.float64)
    prev = b
    for d in range(1, order + 1):
        m = len(knots) - 1 - d
        inv = 1.0 / (d * h)
        left = (xe - knots[:m]) * inv
        right = (knots[d + 1 : d + 1 + m] - xe) * inv
        prev, b = b, left * b[..., :m] + right * b[..., 1 : m + 1]

    def vjp(g):
        gate = (xd >= lo) & (xd <= hi)
        diff = (prev[..., :-1] - prev[..., 1:]) * (1.0 / h)
        return ((g * diff).sum(axis=-1) * gate,)

    return T.custom_op(b, (x,), vjp)


def fit_spline_coefficients(
    xs: np.ndarray, ys: np.ndarray, knots: np.ndarray, order: int = SPLINE_ORDER
) -> np.ndarray:
    """Least-squares coefficients so that sum_c coef_c*B_c approximates the
    samples (xs, ys)."""
    design = spline_basis(np.asarray(xs, dtype=np.float64), knots, order)
    coef, *_ = np.linalg.lstsq(design, np.asarray(ys, dtype=np.float64), rcond=None)
    return coef


@dataclass
class KanLayer:
    """One spline-activation layer: n_in -> n_out with per-edge activations."""

    n_in: int
    n_out: int
    knots: np.ndarray
    order: int
    coef: Tensor  # [n_out, n_in, n_basis]
    w_base: Tensor  # [n_out, n_in]
    w_spline: Tensor  # [n_out, n_in]

    @classmethod
    def create(
        cls,
        n_in: int,
        n_out: int,
        rng: np.random.Generator,
        grid_size: int = GRID_SIZE,
        order: int = SPLINE_ORDER,
    ) -> "KanLayer":
        knots = make_knots(grid_size, order)
        n_basis = grid_size + order
        return cls(
            n_in=n_in,
            n_out=n_out,
            knots=knots,
            order=order,
            coef=T.parameter(rng.normal(0.0, 0.1, size=(n_out, n_in, n_basis)) * 0.1),
            w_base=T.parameter(np.ones((n_out, n_in))),
            w_spline=T.parameter(np.ones((n_out, n_in))),
        )

    @property
    def n_basis(self) -> int:
        return len(self.knots) - self.order - 1

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.coef": self.coef,
            f"{prefix}.w_base": self.w_base,
            f"{prefix}.w_spline": self.w_spline,
        }

    def forward(self, z: Tensor) -> Tensor:
        """z: [B, n_in] -> [B, n_out], summing edge activations per output."""
        basis = _basis(z, self.knots, self.order)  # [B, n_in, n_basis]
        scaled = (self.coef * self.w_spline.reshape(self.n_out, self.n_in, 1)).reshape(
            self.n_out, self.n_in * self.n_basis
        )
        spline_part = basis.reshape(z.shape[0], self.n_in * self.n_basis) @ scaled.transpose(1, 0)
        base_part = T.silu(z) @ self.w_base.transpose(1, 0)
        return spline_part + base_part

    def post_activations(self, z: np.ndarray) -> np.ndarray:
        """Per-edge activation values [B, n_out, n_in] (slow explicit form;
        the layer output is their sum over the last axis)."""
        z = np.asarray(z, dtype=np.float64)
        basis = spline_basis(z, self.knots, self.order)  # [B, n_in, n_basis]
        spline_val = np.einsum("qpc,bpc->bqp", self.coef.data, basis)
        silu = z / (1.0 + np.exp(-z))
        return (
            self.w_base.data[None, :, :] * silu[:, None, :]
            + self.w_spline.data[None, :, :] * spline_val
        )


@dataclass
class KanNetwork:
    """Left-to-right composition of spline layers."""

    layers: list[KanLayer] = field(default_factory=list)

    @classmethod
    def create(
        cls,
        widths: list[int],
        rng: np.random.Generator,
        grid_size: int = GRID_SIZE,
        order: int = SPLINE_ORDER,
    ) -> "KanNetwork":
        layers = [
            KanLayer.create(widths[i], widths[i + 1], rng, grid_size, order)
            for i in range(len(widths) - 1)
        ]
        return cls(layers=layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}.l{i}"))
        return out

    def forward(self, z: Tensor) -> Tensor:
        for layer in self.layers:
            z = layer.forward(z)
        return z


@dataclass
class OpacityHead:
    """Spline network 36 -> k with tanh output and a retention threshold."""

    net: KanNetwork
    tau: float = 0.0

    @classmethod
    def create(
        cls, k: int, rng: np.random.Generator, tau: float = 0.0, hidden: int = 16
    ) -> "OpacityHead":
        return cls(net=KanNetwork.create([36, hidden, k], rng), tau=tau)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters("opacity")

    def forward(self, f_in: Tensor) -> tuple[Tensor, np.ndarray]:
        """Returns per-anchor opacities [N,k] in (-1,1) and the keep mask
        alpha >= tau (inclusive).  Masked Gaussians are dropped from
        rasterization but stay on the tape through the retained ones."""
        alpha = T.tanh(self.net.forward(T.tanh(f_in)))
        return alpha, alpha.data >= self.tau


@dataclass
class CovarianceHead:
    """Spline network 36 -> 7k decoding per-Gaussian scales and rotations.

    Scales are sigmoid-bounded multiples of the anchor scale; quaternions
    are normalized, with an identity fallback (counted in
    ``fallback_count``) when the raw norm is degenerate.
    """

    net: KanNetwork
    k: int
    fallback_count: int = 0

    @classmethod
    def create(cls, k: int, rng: np.random.Generator, hidden: int = 16) -> "CovarianceHead":
        return cls(net=KanNetwork.create([36, hidden, 7 * k], rng), k=k)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters("covariance")

    def forward(self, f_in: Tensor, base_scale: Tensor) -> tuple[Tensor, Tensor]:
        """f_in: [N,36], base_scale: [N,3] -> scales [N,k,3], quats [N,k,4]."""
        n = f_in.shape[0]
        raw = self.net.forward(T.tanh(f_in)).reshape(n, self.k, 7)
        scales, quats, fallbacks = decode_scale_rotation(raw, base_scale)
        self.fallback_count += fallbacks
        return scales, quats


def decode_scale_rotation(raw: Tensor, base_scale: Tensor) -> tuple[Tensor, Tensor, int]:
    """Shared decode for covariance heads: raw [N,k,7] -> (scales, quats).

    Scales are sigmoid-bounded multiples of ``base_scale`` [N,3]; quaternions
    are normalized with an identity substitute where the raw norm is
    degenerate.  Returns the number of fallbacks taken."""
    n = raw.shape[0]
    scales = base_scale.reshape(n, 1, 3) * T.sigmoid(raw[:, :, 0:3])
    q_raw = raw[:, :, 3:7]
    norms_sq = (q_raw * q_raw).sum(axis=2, keepdims=True)
    degenerate = norms_sq.data < 1e-18  # raw norm < 1e-9
    identity = np.zeros((1, 1, 4))
    identity[..., 0] = 1.0
    q_eff = q_raw * (1.0 - degenerate) + Tensor(identity * degenerate)
    quats = q_eff / T.sqrt((q_eff * q_eff).sum(axis=2, keepdims=True))
    return scales, quats, int(degenerate.sum())
