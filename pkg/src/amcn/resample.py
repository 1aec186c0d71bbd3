"""Pixel-center bilinear resampling on the last two axes of an array.

Output pixel ``i`` of an axis resized from ``n_in`` to ``n_out`` samples the
source at ``(i + 0.5) * n_in / n_out - 0.5`` (in source pixel units), clamped
to the source extent. Interpolation is written as ``a + w * (b - a)`` so that
constant fields come back exactly.
"""
from fractions import Fraction

import numpy as np


def as_factor(factor):
    f = Fraction(factor).limit_denominator(10_000) if not isinstance(factor, Fraction) else factor
    if f <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return f


def resized_length(n, factor):
    f = as_factor(factor)
    out = n * f
    if out.denominator != 1 or out < 1:
        raise ValueError(f"cannot resize length {n} by {f}: result {out} is not a positive integer")
    return int(out)


def resized_shape(shape, factor):
    return tuple(resized_length(n, factor) for n in shape)


def axis_stencil(n_in, n_out):
    """Return (i0, i1, w) so that output i = src[i0] + w * (src[i1] - src[i0])."""
    i = np.arange(n_out, dtype=np.float64)
    src = (i + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    w = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, w


def interp_matrix(i0, i1, w, n_in):
    """Dense (n_out, n_in) matrix of the same linear map (used for transposes)."""
    m = np.zeros((len(i0), n_in))
    rows = np.arange(len(i0))
    np.add.at(m, (rows, i0), 1.0 - w)
    np.add.at(m, (rows, i1), w)
    return m


def _lerp_axis(a, axis, n_out):
    i0, i1, w = axis_stencil(a.shape[axis], n_out)
    w = w.astype(a.dtype)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    return lo + w.reshape(shape) * (hi - lo)


def resample_array(a, out_hw):
    """Bilinear resize of the trailing (H, W) axes; computed in ``a``'s dtype."""
    a = np.asarray(a)
    out = _lerp_axis(a, a.ndim - 1, out_hw[1])
    return _lerp_axis(out, a.ndim - 2, out_hw[0])


def resample_mask(mask, out_hw):
    """Output pixels whose stencil touches a masked pixel with nonzero weight."""
    m = np.asarray(mask, dtype=bool)
    for axis, n_out in ((m.ndim - 1, out_hw[1]), (m.ndim - 2, out_hw[0])):
        i0, i1, w = axis_stencil(m.shape[axis], n_out)
        shape = [1] * m.ndim
        shape[axis] = n_out
        m = np.take(m, i0, axis=axis) | (np.take(m, i1, axis=axis) & (w > 0).reshape(shape))
    return m
