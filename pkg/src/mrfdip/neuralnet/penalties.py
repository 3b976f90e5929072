"""Smoothed anisotropic total variation on network tensors."""

from __future__ import annotations

import numpy as np


def tv_penalty(x, epsilon: float):
    """``sum sqrt(d^2 + eps^2) - eps`` over channels, voxels and spatial axes.

    ``x`` is ``(1, C, *spatial)``; ``d`` are forward differences with
    replicate boundary (the last difference along each axis is zero).

    Returns
    -------
    value : float
    grad : array like ``x``
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError(f"expected (1, C, *spatial), got {x.shape}")
    value = 0.0
    grad = np.zeros_like(x)
    for ax in range(2, x.ndim):
        d = np.diff(x, axis=ax)
        s = np.sqrt(d * d + epsilon * epsilon)
        value += float(np.sum(s - epsilon))
        w = d / s
        lo = [slice(None)] * x.ndim
        hi = [slice(None)] * x.ndim
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        grad[tuple(lo)] -= w
        grad[tuple(hi)] += w
    return value, grad
