"""Charbonnier and degradation losses with adaptive weighting.

Both losses work in normalized precipitation units (mm divided by the
precipitation channel std) and reduce in float64 whatever the tensor dtype.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nn
from .nn.tensor import make_node, _accumulate

EPSILON = 1e-3
LOSS_COLUMNS = ("epoch", "iteration", "L_c", "L_d", "alpha", "beta", "L_total")


@dataclass(frozen=True)
class LossReport:
    L_c: float
    L_d: float
    alpha: float
    beta: float
    L_total: float


def charbonnier(diff, eps=EPSILON, per_patch=True):
    """Mean over patches of sqrt(||diff_i||^2 + eps^2) for a (B, ...) tensor.

    With ``per_patch=False`` the square root is taken per element and the
    result is the mean over all elements instead.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = diff.data.astype(np.float64)
    if d.ndim < 1 or d.shape[0] < 1:
        raise ValueError("charbonnier: need at least one patch")
    if per_patch:
        sq = (d.reshape(d.shape[0], -1) ** 2).sum(axis=1)
    else:
        sq = d.reshape(-1) ** 2
    norms = np.sqrt(sq + eps * eps)
    # eps + mean(norm - eps) makes a zero residual come out as eps exactly
    value = eps + (norms - eps).mean()

    def backward(g):
        g = float(g)
        if per_patch:
            scale = g / (len(norms) * norms)
            grad = d * scale.reshape((-1,) + (1,) * (d.ndim - 1))
        else:
            grad = (d.reshape(-1) * (g / (len(norms) * norms))).reshape(d.shape)
        _accumulate(diff, grad.astype(diff.dtype))

    return make_node(np.asarray(value, dtype=np.float64), (diff,), backward, "charbonnier")


def charbonnier_loss(pred_residual, target_residual, eps=EPSILON, per_patch=True):
    """Fine-scale loss between the predicted residual xi and rho = label - f_u(lr)."""
    target = np.asarray(target_residual.data if isinstance(target_residual, nn.Tensor)
                        else target_residual)
    if target.shape != pred_residual.shape:
        raise ValueError(f"charbonnier_loss: shape mismatch {pred_residual.shape} vs {target.shape}")
    return charbonnier(nn.add_const(pred_residual, -target), eps, per_patch)


def degradation_loss(lr_precip, hr_pred, eps=EPSILON, factor=None, per_patch=True):
    """Coarse-scale loss between lr_precip and the bilinear downsample of hr_pred.

    ``factor`` is the integer scale r; it defaults to the ratio of the two
    grids and must divide the high-resolution size.
    """
    lr = np.asarray(lr_precip.data if isinstance(lr_precip, nn.Tensor) else lr_precip)
    H, W = hr_pred.shape[-2:]
    if factor is None:
        if lr.shape[-2] < 1 or H % lr.shape[-2]:
            raise ValueError(f"degradation_loss: {lr.shape[-2:]} does not divide {(H, W)}")
        factor = H // lr.shape[-2]
    if H % factor or W % factor:
        raise ValueError(f"degradation_loss: scale {factor} does not divide {(H, W)}")
    down = nn.bilinear_resize_diff(hr_pred, Fraction(1, int(factor)))
    if down.shape != lr.shape:
        raise ValueError(f"degradation_loss: downsampled {down.shape} vs low-resolution {lr.shape}")
    return charbonnier(nn.add_const(down, -lr), eps, per_patch)


def _scalar(x):
    return float(x.data) if isinstance(x, nn.Tensor) else float(x)


def loss_weights(l_c, l_d):
    """(alpha, beta) = (L_c, L_d) / (L_c + L_d), complementary so they sum to one exactly."""
    l_c, l_d = _scalar(l_c), _scalar(l_d)
    if not (l_c > 0 and l_d > 0) or not (math.isfinite(l_c) and math.isfinite(l_d)):
        raise ValueError(f"losses must be positive and finite, got L_c={l_c}, L_d={l_d}")
    if l_c <= l_d:
        alpha = l_c / (l_c + l_d)
        return alpha, 1.0 - alpha
    beta = l_d / (l_c + l_d)
    return 1.0 - beta, beta


def total_loss(l_c, l_d):
    alpha, beta = loss_weights(l_c, l_d)
    l_c, l_d = _scalar(l_c), _scalar(l_d)
    return LossReport(l_c, l_d, alpha, beta, alpha * l_c + beta * l_d)


def weighted_total(l_c, l_d, use_degradation=True):
    """Differentiable alpha*L_c + beta*L_d with the weights held constant.

    Without the degradation term the total is L_c itself (alpha=1, beta=0);
    L_d is still reported.
    """
    if not use_degradation:
        lc = _scalar(l_c)
        return l_c, LossReport(lc, _scalar(l_d), 1.0, 0.0, lc)
    report = total_loss(l_c, l_d)
    out = nn.add(nn.scale(l_c, report.alpha), nn.scale(l_d, report.beta))
    return out, report
