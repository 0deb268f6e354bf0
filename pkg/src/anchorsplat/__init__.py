"""Anchored neural Gaussian splatting on a differentiable CPU pipeline.

The package trains a desk-scale radiance field: a voxelized anchor cloud
carries learned features, attention and spline heads decode per-anchor
Gaussian attributes, and a tiled alpha-compositing rasterizer renders views
under a multi-scale perceptual loss.  Everything runs on float64 numpy with
a self-contained reverse-mode tape, so gradients, renders, and training
runs are bit-reproducible.
"""

from .tensor import Tensor, no_grad, parameter

__all__ = ["Tensor", "no_grad", "parameter"]
__version__ = "0.1.0"
