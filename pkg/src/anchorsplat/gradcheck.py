"""Central finite-difference verification of tape gradients.

``gradient_errors`` evaluates a scalar loss twice per parameter element with
the element nudged by ±step, and compares the resulting slope against what
``backward`` produced.  The loss closure must re-read the leaf tensors'
``data`` buffers on every call, which is the natural shape for a forward
pass written against long-lived parameter tensors.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad


def central_difference(
    loss_fn: Callable[[], Tensor], x: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Numeric d(loss)/dx by perturbing ``x`` in place, element by element."""
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    with no_grad():
        for i in range(flat_x.size):
            orig = flat_x[i]
            flat_x[i] = orig + step
            hi = float(loss_fn().data)
            flat_x[i] = orig - step
            lo = float(loss_fn().data)
            flat_x[i] = orig
            flat_g[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_errors(
    loss_fn: Callable[[], Tensor],
    leaves: Mapping[str, Tensor],
    step: float = 1e-5,
    rtol: float = 1e-3,
    atol: float = 1e-7,
) -> dict[str, str]:
    """Compare analytic and numeric gradients for every leaf.

    Returns a dict of failure descriptions keyed by leaf name; empty means
    every element satisfied ``|analytic - numeric| <= atol + rtol * scale``
    with ``scale = max(|analytic|, |numeric|)``.
    """
    for t in leaves.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in leaves.items()
    }

    failures: dict[str, str] = {}
    for name, t in leaves.items():
        numeric = central_difference(loss_fn, t.data, step=step)
        a, n = analytic[name], numeric
        tol = atol + rtol * np.maximum(np.abs(a), np.abs(n))
        bad = np.abs(a - n) > tol
        if bad.any():
            idx = np.unravel_index(np.argmax(np.abs(a - n) - tol), a.shape)
            failures[name] = (
                f"worst at {idx}: analytic={a[idx]:.6e} numeric={n[idx]:.6e} "
                f"({int(bad.sum())}/{a.size} elements outside tolerance)"
            )
    return failures
