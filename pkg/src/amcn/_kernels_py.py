"""numpy im2col/col2im, used when the compiled extension is unavailable.

Same layout and summation order as the compiled kernels:
``cols[(b*H + y)*W + x, (ky*k + kx)*C + c]``.
"""
import numpy as np


def im2col(x, k):
    B, C, H, W = x.shape
    p = (k - 1) // 2
    xt = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((B, H, W, k, k, C), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xt[:, ky:ky + H, kx:kx + W, :]
    return cols.reshape(B * H * W, k * k * C)


def col2im(cols, B, C, H, W, k):
    p = (k - 1) // 2
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=cols.dtype)
    c6 = cols.reshape(B, H, W, k, k, C)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + H, kx:kx + W, :] += c6[:, :, :, ky, kx, :]
    return np.ascontiguousarray(dxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2))
