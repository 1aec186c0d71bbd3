"""Reverse-mode differentiation over numpy arrays.

Only the layer vocabulary the downscaling network needs is provided:
size-preserving conv2d, relu, sigmoid, elementwise add/sub/mul, channel
concatenation and slicing, channel and spatial gating, global average
pooling, fully connected layers and differentiable bilinear resizing.

Values are float32 for training and inference and float64 for gradient
checking. Every forward op verifies that its output is finite.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .. import kernels
from ..resample import axis_stencil, interp_matrix, resample_array, resized_shape


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # intermediate gradients are not needed once propagated
                node.grad = None


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(np.ascontiguousarray(data), requires_grad=True, op="param")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def make_node(data, parents, backward, op):
    """Wrap an op result; the node only tracks gradients if a parent does."""
    # a single reduction catches NaN/Inf (they propagate into the sum); the
    # elementwise test only runs when the sum itself is not finite
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None, op=op)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    _check_same(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    _check_same(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    _check_same(a, b, "mul")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return make_node(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    """Multiply by a python/numpy scalar constant."""
    c = a.data.dtype.type(c)

    def backward(g):
        _accumulate(a, g * c)

    return make_node(a.data * c, (a,), backward, "scale")


def add_const(a, c):
    """Add a constant array (no gradient) of the same shape."""
    c = np.asarray(c, dtype=a.dtype)
    if c.shape != a.shape:
        raise ValueError(f"add_const: shape mismatch {a.shape} vs {c.shape}")

    def backward(g):
        _accumulate(a, g)

    return make_node(a.data + c, (a,), backward, "add_const")


class ActivationPattern:
    """Relu on/off masks recorded on one forward pass and replayed on later ones.

    Finite differences straddling a relu kink measure a one-sided slope;
    replaying the base-point masks keeps every perturbed evaluation on the
    linear piece that reverse mode differentiates.
    """

    def __init__(self):
        self.masks = []
        self.pos = 0
        self.recording = True

    def rewind(self):
        self.pos = 0
        self.recording = not self.masks

    def next_mask(self, x):
        if self.recording:
            mask = x > 0
            self.masks.append(mask)
            return mask
        if self.pos >= len(self.masks) or self.masks[self.pos].shape != x.shape:
            raise RuntimeError("forward pass does not match the recorded activation pattern")
        mask = self.masks[self.pos]
        self.pos += 1
        return mask


_pattern = None


@contextmanager
def frozen_activations(pattern):
    global _pattern
    prev, _pattern = _pattern, pattern
    try:
        yield pattern
    finally:
        _pattern = prev


def relu(x):
    if _pattern is None:
        out = np.maximum(x.data, x.data.dtype.type(0))
    else:
        out = np.where(_pattern.next_mask(x.data), x.data, x.data.dtype.type(0))

    def backward(g):
        _accumulate(x, g * (out > 0))

    return make_node(out, (x,), backward, "relu")


def _sigmoid(v):
    half = v.dtype.type(0.5)
    return half * (np.tanh(half * v) + 1)


def sigmoid(x):
    s = _sigmoid(x.data)

    def backward(g):
        _accumulate(x, g * s * (1 - s))

    return make_node(s, (x,), backward, "sigmoid")


# ---------------------------------------------------------------- structure

def concat_channels(tensors):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_channels: empty list")
    ref = tensors[0].shape
    for t in tensors:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, g[:, start:start + n])
            start += n

    return make_node(out, tuple(tensors), backward, "concat")


def concat_leading(tensors):
    """Concatenate along axis 0 (stacks conv kernels or biases of layers sharing an input)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat_leading: empty list")
    for t in tensors[1:]:
        if t.shape[1:] != tensors[0].shape[1:]:
            raise ValueError(f"concat_leading: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        start = 0
        for t, n in zip(tensors, sizes):
            _accumulate(t, g[start:start + n])
            start += n

    return make_node(out, tuple(tensors), backward, "concat0")


def slice_channels(x, start, stop):
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        _accumulate(x, full)

    return make_node(x.data[:, start:stop].copy(), (x,), backward, "slice")


def split_channels(x, sizes):
    """Split the channel axis into consecutive pieces of the given sizes.

    The pieces write their gradients into one buffer owned by a hidden
    identity node, so backward costs one full-size array rather than one
    per piece.
    """
    sizes = [int(n) for n in sizes]
    if any(n < 1 for n in sizes) or sum(sizes) != x.shape[1]:
        raise ValueError(f"split_channels: sizes {sizes} do not partition {x.shape[1]} channels")

    def hold_backward(g):
        _accumulate(x, g)

    holder = make_node(x.data, (x,), hold_backward, "split")
    outs, start = [], 0
    for n in sizes:
        def backward(g, a=start, b=start + n):
            if holder.grad is None:
                holder.grad = np.zeros_like(holder.data)
            holder.grad[:, a:b] += g

        outs.append(make_node(x.data[:, start:start + n], (holder,), backward, "split_part"))
        start += n
    return outs


def scale_channels(x, gate):
    """x (B,C,H,W) times gate (B,C) broadcast over space."""
    if gate.data.ndim != 2 or gate.shape != x.shape[:2]:
        raise ValueError(f"scale_channels: gate {gate.shape} vs input {x.shape}")
    gd = gate.data[:, :, None, None]

    def backward(g):
        _accumulate(x, g * gd)
        _accumulate(gate, (g * x.data).sum(axis=(2, 3)))

    return make_node(x.data * gd, (x, gate), backward, "scale_channels")


def scale_spatial(x, gate):
    """x (B,C,H,W) times a one-channel gate (B,1,H,W) broadcast over channels."""
    if gate.data.ndim != 4 or gate.shape[1] != 1 or gate.shape[0] != x.shape[0] \
            or gate.shape[2:] != x.shape[2:]:
        raise ValueError(f"scale_spatial: gate {gate.shape} vs input {x.shape}")

    def backward(g):
        _accumulate(x, g * gate.data)
        _accumulate(gate, (g * x.data).sum(axis=1, keepdims=True))

    return make_node(x.data * gate.data, (x, gate), backward, "scale_spatial")


def global_avg_pool(x):
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    return make_node(out, (x,), backward, "avgpool")


def fully_connected(x, w, b):
    """y = x @ w.T + b with x (B, F_in), w (F_out, F_in), b (F_out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or w.shape[1] != x.shape[1] \
            or b.shape != (w.shape[0],):
        raise ValueError(f"fully_connected: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data.T + b.data

    def backward(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        _accumulate(b, g.sum(axis=0))

    return make_node(out, (x, w, b), backward, "fc")


def sum_all(x):
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward, "sum")


# ---------------------------------------------------------------- convolution

def conv2d(x, w, b, padding=None):
    """Size-preserving cross-correlation plus bias.

    x is (B, C_in, H, W); w is (C_out, C_in, k, k) with odd k; b is (C_out,).
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    c_out, c_in, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if padding is not None and padding != (k - 1) // 2:
        raise ValueError(f"conv2d: only size-preserving padding {(k - 1) // 2} is supported")
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {c_in}")
    if b.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({c_out},)")
    B, _, H, W = x.shape
    xd = np.ascontiguousarray(x.data)
    if k > 1 and c_out < c_in:
        out = _conv_output_side(xd, w.data, k)
    else:
        out = _pixels_to_nchw(_columns(xd, k) @ _tap_matrix(w.data).T, B, H, W)
    out = out + b.data[None, :, None, None]

    def backward(g):
        _conv2d_backward(x, w, b, g, xd, k)

    return make_node(np.ascontiguousarray(out), (x, w, b), backward, "conv2d")


# Two equivalent lowerings of a k x k conv onto matrix products. The input
# side one expands x into (pixels, k*k*c_in) columns; the output side one
# multiplies first and then sums the k*k shifted taps of a (pixels,
# k*k*c_out) product, which is far less data when c_out < c_in. Column
# order is (ky, kx, channel) in both.

def _tap_matrix(w):
    c_out = w.shape[0]
    return w.transpose(0, 2, 3, 1).reshape(c_out, -1)


def _flipped_matrix(w):
    # rows c_in, columns (ty, tx, c_out) of the spatially flipped kernel
    return w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(w.shape[1], -1)


def _pixels(a):
    B, C, H, W = a.shape
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1)).reshape(B * H * W, C)


def _pixels_to_nchw(m, B, H, W):
    return m.reshape(B, H, W, -1).transpose(0, 3, 1, 2)


def _columns(xd, k):
    if k == 1:
        return _pixels(xd)
    return kernels.im2col(xd, k)


def _conv_output_side(xd, w, k):
    B, _, H, W = xd.shape
    z = _pixels(xd) @ _flipped_matrix(w)
    return kernels.col2im(np.ascontiguousarray(z), B, w.shape[0], H, W, k)


def _conv2d_backward(x, w, b, g, xd, k):
    # columns are rebuilt here rather than kept alive between passes: holding
    # them for every layer costs more in fresh page faults than recomputing
    c_out, c_in = w.shape[:2]
    B, _, H, W = x.shape
    g = np.ascontiguousarray(g)
    gmat = _pixels(g)
    if b.requires_grad:
        _accumulate(b, gmat.sum(axis=0))
    if k > 1 and c_out < c_in:
        gcols = kernels.im2col(g, k)
        wf = _flipped_matrix(w.data)
        if w.requires_grad:
            dwf = (_pixels(xd).T @ gcols).reshape(c_in, k, k, c_out).transpose(3, 0, 1, 2)
            _accumulate(w, np.ascontiguousarray(dwf[:, :, ::-1, ::-1]))
        if x.requires_grad:
            _accumulate(x, np.ascontiguousarray(_pixels_to_nchw(gcols @ wf.T, B, H, W)))
        return
    if w.requires_grad:
        dw = (_columns(xd, k).T @ gmat).T.reshape(c_out, k, k, c_in).transpose(0, 3, 1, 2)
        _accumulate(w, np.ascontiguousarray(dw))
    if x.requires_grad:
        dcols = gmat @ _tap_matrix(w.data)
        if k == 1:
            dx = _pixels_to_nchw(dcols, B, H, W)
        else:
            dx = kernels.col2im(dcols, B, c_in, H, W, k)
        _accumulate(x, np.ascontiguousarray(dx))


# ---------------------------------------------------------------- resampling

def bilinear_resize_diff(x, factor):
    """Pixel-center bilinear resize of the last two axes of a (B, C, H, W) tensor.

    Forward values come from the same routine as grid resampling; the
    backward pass applies the transpose of the interpolation map.
    """
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize_diff: expected 4-D input, got {x.shape}")
    H, W = x.shape[2:]
    Ho, Wo = resized_shape((H, W), factor)
    out = resample_array(x.data, (Ho, Wo))

    def backward(g):
        my = interp_matrix(*axis_stencil(H, Ho), H).astype(g.dtype)
        mx = interp_matrix(*axis_stencil(W, Wo), W).astype(g.dtype)
        _accumulate(x, np.ascontiguousarray(np.einsum("ph,bcpq,qw->bchw", my, g, mx)))

    return make_node(out, (x,), backward, "bilinear")
