"""Granular-structural attention over anchors, ending in the color head.

The granular stage reshapes each 36-dim anchor row to a 6x6 grid, pools it
along both directions, and turns the pooled profiles into sigmoid gates
that rescale the grid entries.  The structural stage is multi-head
self-attention across the anchor rows (7 heads of width 5, inner dim 35)
with a residual back onto the gated features and a LayerNorm.  Colors come
from a final sigmoid linear projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, softmax

GRID_H = 6
GRID_W = 6
FEATURE_COLS = GRID_H * GRID_W  # 36 = 1 (distance) + 3 (direction) + 32 (feature)
NUM_HEADS = 7
HEAD_DIM = 5
INNER_DIM = NUM_HEADS * HEAD_DIM  # 35; projected back to 36 by w_out


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    lim = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-lim, lim, size=shape)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance, then scale and shift."""
    centered = x - x.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * gain + bias


@dataclass
class GranularParams:
    """Directional pooling gates: a width-3 conv, a per-vector normalization,
    and a sigmoid, independently for the row and column profiles."""

    kernel_h: Tensor  # [3]
    bias_h: Tensor  # scalar
    gain_h: Tensor  # [GRID_H]
    shift_h: Tensor  # [GRID_H]
    kernel_w: Tensor  # [3]
    bias_w: Tensor  # scalar
    gain_w: Tensor  # [GRID_W]
    shift_w: Tensor  # [GRID_W]

    @classmethod
    def create(cls, rng: np.random.Generator) -> "GranularParams":
        return cls(
            kernel_h=T.parameter(_uniform(rng, 3, (3,))),
            bias_h=T.parameter(_uniform(rng, 3, ())),
            gain_h=T.parameter(np.ones(GRID_H)),
            shift_h=T.parameter(np.zeros(GRID_H)),
            kernel_w=T.parameter(_uniform(rng, 3, (3,))),
            bias_w=T.parameter(_uniform(rng, 3, ())),
            gain_w=T.parameter(np.ones(GRID_W)),
            shift_w=T.parameter(np.zeros(GRID_W)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "hgsa.granular.kernel_h": self.kernel_h,
            "hgsa.granular.bias_h": self.bias_h,
            "hgsa.granular.gain_h": self.gain_h,
            "hgsa.granular.shift_h": self.shift_h,
            "hgsa.granular.kernel_w": self.kernel_w,
            "hgsa.granular.bias_w": self.bias_w,
            "hgsa.granular.gain_w": self.gain_w,
            "hgsa.granular.shift_w": self.shift_w,
        }


def _conv3(v: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Width-3 single-channel convolution with zero padding; v: [N, L]."""
    n, length = v.shape
    zeros = Tensor(np.zeros((n, 1)))
    padded = T.concat([zeros, v, zeros], axis=1)
    return (
        padded[:, 0:length] * kernel[0]
        + padded[:, 1 : length + 1] * kernel[1]
        + padded[:, 2 : length + 2] * kernel[2]
        + bias
    )


def _gate(pooled: Tensor, kernel: Tensor, bias: Tensor, gain: Tensor, shift: Tensor) -> Tensor:
    """Conv -> per-vector normalization -> sigmoid, on pooled profiles [N, L]."""
    v = _conv3(pooled, kernel, bias)
    centered = v - v.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    return T.sigmoid(centered / T.sqrt(var + 1e-5) * gain + shift)


def granular_attention(f_in: Tensor, params: GranularParams) -> Tensor:
    """Gate each row's 6x6 grid by its pooled row/column profiles.

    f_in: [N, 36] -> f_gra: [N, 36] with
    grid_out(h, w) = grid_in(h, w) * y_h(h) * y_w(w).
    """
    n = f_in.shape[0]
    grid = f_in.reshape(n, GRID_H, GRID_W)
    pooled_h = grid.mean(axis=2)  # [N, GRID_H]
    pooled_w = grid.mean(axis=1)  # [N, GRID_W]
    y_h = _gate(pooled_h, params.kernel_h, params.bias_h, params.gain_h, params.shift_h)
    y_w = _gate(pooled_w, params.kernel_w, params.bias_w, params.gain_w, params.shift_w)
    gated = grid * y_h.reshape(n, GRID_H, 1) * y_w.reshape(n, 1, GRID_W)
    return gated.reshape(n, FEATURE_COLS)


@dataclass
class StructuralParams:
    """Multi-head attention projections plus the output LayerNorm."""

    w_q: Tensor  # [36, INNER_DIM]
    w_k: Tensor  # [36, INNER_DIM]
    w_v: Tensor  # [36, INNER_DIM]
    w_out: Tensor  # [INNER_DIM, 36]
    ln_gain: Tensor  # [36]
    ln_bias: Tensor  # [36]

    @classmethod
    def create(cls, rng: np.random.Generator) -> "StructuralParams":
        return cls(
            w_q=T.parameter(_uniform(rng, FEATURE_COLS, (FEATURE_COLS, INNER_DIM))),
            w_k=T.parameter(_uniform(rng, FEATURE_COLS, (FEATURE_COLS, INNER_DIM))),
            w_v=T.parameter(_uniform(rng, FEATURE_COLS, (FEATURE_COLS, INNER_DIM))),
            w_out=T.parameter(_uniform(rng, INNER_DIM, (INNER_DIM, FEATURE_COLS))),
            ln_gain=T.parameter(np.ones(FEATURE_COLS)),
            ln_bias=T.parameter(np.zeros(FEATURE_COLS)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "hgsa.attn.w_q": self.w_q,
            "hgsa.attn.w_k": self.w_k,
            "hgsa.attn.w_v": self.w_v,
            "hgsa.attn.w_out": self.w_out,
            "hgsa.attn.ln_gain": self.ln_gain,
            "hgsa.attn.ln_bias": self.ln_bias,
        }


def structural_attention(f_gra: Tensor, params: StructuralParams) -> Tensor:
    """Scaled dot-product self-attention over the anchor rows, residual onto
    the input, LayerNorm.  f_gra: [N, 36] -> [N, 36]."""
    n = f_gra.shape[0]

    def split_heads(x: Tensor) -> Tensor:  # [N, 35] -> [heads, N, head_dim]
        return x.reshape(n, NUM_HEADS, HEAD_DIM).transpose(1, 0, 2)

    q = split_heads(f_gra @ params.w_q)
    k = split_heads(f_gra @ params.w_k)
    v = split_heads(f_gra @ params.w_v)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(HEAD_DIM))
    attn = softmax(scores, axis=-1)  # [heads, N, N]
    heads_out = (attn @ v).transpose(1, 0, 2).reshape(n, INNER_DIM)
    out = heads_out @ params.w_out
    return layer_norm(out + f_gra, params.ln_gain, params.ln_bias)


def attention_weights(f_gra: Tensor, params: StructuralParams) -> np.ndarray:
    """The softmax attention matrices [heads, N, N] (diagnostic view)."""
    n = f_gra.shape[0]
    with T.no_grad():
        q = (f_gra @ params.w_q).reshape(n, NUM_HEADS, HEAD_DIM).transpose(1, 0, 2)
        k = (f_gra @ params.w_k).reshape(n, NUM_HEADS, HEAD_DIM).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(HEAD_DIM))
        return softmax(scores, axis=-1).data


@dataclass
class ColorHeadParams:
    """Linear 36 -> 3k with sigmoid output."""

    weight: Tensor  # [36, 3k]
    bias: Tensor  # [3k]
    k: int

    @classmethod
    def create(cls, k: int, rng: np.random.Generator) -> "ColorHeadParams":
        return cls(
            weight=T.parameter(_uniform(rng, FEATURE_COLS, (FEATURE_COLS, 3 * k))),
            bias=T.parameter(_uniform(rng, FEATURE_COLS, (3 * k,))),
            k=k,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"hgsa.color.weight": self.weight, "hgsa.color.bias": self.bias}


def color_head(f_hgsa: Tensor, params: ColorHeadParams) -> Tensor:
    """Per-Gaussian RGB in (0,1): [N, 36] -> [N, k, 3]."""
    n = f_hgsa.shape[0]
    return T.sigmoid(f_hgsa @ params.weight + params.bias).reshape(n, params.k, 3)
