"""Composite colour loss: L1 + lambda * D-SSIM, with its image gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ugsplat.metrics import _check_pair, ssim_backward, ssim_map


@dataclass
class LossValue:
    total: float
    l1: float
    dssim: float
    grad: np.ndarray


def colour_loss(rendered, reference, lam: float = 0.2) -> LossValue:
    """``mean|x - y| + lam * (1 - SSIM(x, y)) / 2`` and its gradient w.r.t. ``x``."""
    x, y = _check_pair(rendered, reference)
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    n = x.size
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / n
    if np.array_equal(x, y):
        # exact optimum of both terms
        return LossValue(0.0, 0.0, 0.0, np.zeros_like(x))
    state = ssim_map(x, y)
    dssim = float((1.0 - state.smap.mean()) / 2.0)
    if lam > 0:
        grad = grad + lam * ssim_backward(state, np.full(x.shape, -0.5 / n))
    return LossValue(l1 + lam * dssim, l1, dssim, grad)
