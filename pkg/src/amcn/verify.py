"""End-to-end gradient verification of the network on a tiny configuration."""
from __future__ import annotations

import numpy as np

from . import nn
from .losses import charbonnier_loss, degradation_loss, total_loss
from .model import AmcnConfig, AmcnModel, amcn_forward
from .preprocess import CANONICAL_CHANNELS, NormStats

TINY = dict(base_channels=8, rdb_growth=8, scale_factor=4)


def tiny_config(**overrides):
    return AmcnConfig(**{**TINY, **overrides})


def random_batch(rng, cfg, batch=2, patch=16):
    """Positive skewed precipitation patches and smooth-ish ancillary fields."""
    r = cfg.scale_factor
    q = patch // r
    lr = rng.lognormal(3.0, 0.6, size=(batch, 1, q, q))
    anc = rng.standard_normal((batch, cfg.n_ancillary, patch, patch))
    label = np.repeat(np.repeat(lr, r, axis=2), r, axis=3) * rng.lognormal(0.0, 0.2, (batch, 1, patch, patch))
    # smooth the ancillary noise a little so features are spatially coherent
    anc = 0.5 * anc + 0.5 * np.roll(anc, 1, axis=-1)
    return lr, anc, label


def network_loss_fn(model, lr, anc, label):
    """Closure computing the fixed-weight total loss.

    The adaptive weights are frozen at their values for the current
    parameters: backpropagation treats them as constants, so the finite
    differences must too. Relu masks are frozen the same way.
    """
    std_p = model.norm_stats.std[0]

    def parts():
        _, xi, up = amcn_forward(model, lr, anc)
        l_c = charbonnier_loss(xi, (label - up) / std_p)
        l_d = degradation_loss(lr / std_p, nn.add_const(xi, up / std_p), factor=model.config.scale_factor)
        return l_c, l_d

    l_c, l_d = parts()
    report = total_loss(l_c, l_d)
    alpha, beta = report.alpha, report.beta

    pattern = nn.ActivationPattern()

    def loss():
        with nn.frozen_activations(pattern):
            pattern.rewind()
            l_c, l_d = parts()
        if not model.config.use_degradation_loss:
            return l_c
        return nn.add(nn.scale(l_c, alpha), nn.scale(l_d, beta))

    return loss


def network_gradcheck(cfg=None, batch=2, patch=16, seed=0, tolerance=1e-4, max_elements=2000,
                      per_param_min=8, floor=1e-6):
    """Gradcheck of the total loss w.r.t. every parameter group of a float64 model.

    The relative-error floor is absolute: with a loss of order one, central
    differences at h=1e-5 carry roundoff near 1e-10, so gradients far below
    ``floor`` cannot be resolved to ``tolerance`` by any implementation.
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    lr, anc, label = random_batch(rng, cfg, batch, patch)
    up = np.repeat(np.repeat(lr, cfg.scale_factor, axis=2), cfg.scale_factor, axis=3)
    n = 1 + cfg.n_ancillary
    names = CANONICAL_CHANNELS if n == len(CANONICAL_CHANNELS) else tuple(f"ch{i}" for i in range(n))
    mean = (float(up.mean()),) + tuple(float(v) for v in anc.mean(axis=(0, 2, 3)))
    std = (float(up.std()),) + tuple(float(v) for v in anc.std(axis=(0, 2, 3)))
    model = AmcnModel(cfg, norm_stats=NormStats(mean, std, names), seed=seed, dtype=np.float64)
    # lift the small-init layers so every path carries a visible gradient
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
        elif name.endswith((".rab.out.w", ".rdb.fuse.w")):
            p.data *= 5.0
    loss = network_loss_fn(model, lr, anc, label)
    return nn.gradcheck(loss, model.parameters(), tolerance=tolerance, max_elements=max_elements,
                        per_param_min=per_param_min, seed=seed, floor=floor)
