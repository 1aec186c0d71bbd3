# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im for size-preserving k x k cross-correlation.

Column layout is pixel-major with channels innermost:
``cols[(b*H + y)*W + x, (ky*k + kx)*C + c]``. col2im accumulates in
ascending (ky, kx) order so results match the numpy fallback bit for bit.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t K = C * k * k
    cdef int p = (k - 1) // 2
    dtype = np.float32 if floating is float else np.float64
    # channels-last copy so every stencil tap is a contiguous run of C values
    xt_arr = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
    cdef floating[:, :, :, ::1] xt = xt_arr
    out = np.empty((B * H * W, K), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t b, c, ky, kx, y, xx, sy, sx, row, j
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    j = 0
                    for ky in range(k):
                        sy = y + ky - p
                        for kx in range(k):
                            sx = xx + kx - p
                            if sy < 0 or sy >= H or sx < 0 or sx >= W:
                                for c in range(C):
                                    cols[row, j + c] = 0
                            else:
                                for c in range(C):
                                    cols[row, j + c] = xt[b, sy, sx, c]
                            j += C
    return out


def col2im(floating[:, ::1] cols, int B, int C, int H, int W, int k):
    cdef int p = (k - 1) // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C, H, W), dtype=dtype)
    acc_arr = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef floating[::1] acc = acc_arr
    cdef Py_ssize_t b, c, ky, kx, sy, sx, y, xx, row, j
    with nogil:
        for b in range(B):
            for sy in range(H):
                for sx in range(W):
                    for c in range(C):
                        acc[c] = 0
                    # gather every output pixel whose stencil covered (sy, sx)
                    for ky in range(k):
                        y = sy + p - ky
                        if y < 0 or y >= H:
                            continue
                        for kx in range(k):
                            xx = sx + p - kx
                            if xx < 0 or xx >= W:
                                continue
                            row = (b * H + y) * W + xx
                            j = (ky * k + kx) * C
                            for c in range(C):
                                acc[c] += cols[row, j + c]
                    for c in range(C):
                        dx[b, c, sy, sx] = acc[c]
    return out
