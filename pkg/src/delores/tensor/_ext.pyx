# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the conv / pool / resize inner loops.

Every routine here has a numpy twin in ``_fallback.py`` with the same
signature. The accumulation order in ``col2im3x3`` and ``maxpool2x2_*``
matches the fallback exactly, so both backends are bit-identical on those.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double

cnp.import_array()


def im2col3x3(real[:, :, :, ::1] x):
    """[B,C,H,W] -> [B*H*W, 9*C] patch matrix (3x3 window, zero pad 1).

    Column ``(ky*3 + kx)*C + c`` holds channel c at offset (ky, kx).
    """
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    # channels-last copy so each tap is a contiguous run of C values
    xt_arr = np.ascontiguousarray(np.asarray(x).transpose(0, 2, 3, 1))
    cdef real[:, :, :, ::1] xt = xt_arr
    out_arr = np.zeros((B * H * W, 9 * C), dtype=dtype)
    cdef real[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, y, xx, ky, kx, sy, sx, row, base
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    row = (b * H + y) * W + xx
                    for ky in range(3):
                        sy = y + ky - 1
                        if sy < 0 or sy >= H:
                            continue
                        for kx in range(3):
                            sx = xx + kx - 1
                            if sx < 0 or sx >= W:
                                continue
                            base = (ky * 3 + kx) * C
                            for c in range(C):
                                out[row, base + c] = xt[b, sy, sx, c]
    return out_arr


def col2im3x3(real[:, ::1] cols, Py_ssize_t B, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W):
    """Adjoint of ``im2col3x3``: scatter-add patch gradients back to [B,C,H,W]."""
    dtype = np.float32 if real is float else np.float64
    acc_arr = np.empty((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t b, c, y, xx, ky, kx, oy, ox, row, base
    with nogil:
        for b in range(B):
            for y in range(H):
                for xx in range(W):
                    for c in range(C):
                        acc[b, y, xx, c] = 0
                    # a patch centred at (oy, ox) sees this pixel through
                    # offset (ky, kx) = (y + 1 - oy, xx + 1 - ox)
                    for ky in range(3):
                        oy = y + 1 - ky
                        if oy < 0 or oy >= H:
                            continue
                        for kx in range(3):
                            ox = xx + 1 - kx
                            if ox < 0 or ox >= W:
                                continue
                            row = (b * H + oy) * W + ox
                            base = (ky * 3 + kx) * C
                            for c in range(C):
                                acc[b, y, xx, c] = acc[b, y, xx, c] + cols[row, base + c]
    return np.ascontiguousarray(acc_arr.transpose(0, 3, 1, 2))


def maxpool2x2_forward(real[:, :, :, ::1] x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3, row-major, first wins."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H // 2, Wo = W // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, C, Ho, Wo), dtype=dtype)
    idx_arr = np.empty((B, C, Ho, Wo), dtype=np.uint8)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, c, i, j
    cdef real best, v
    cdef cnp.uint8_t k
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[b, c, 2 * i, 2 * j]
                        k = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, c, i, j] = best
                        idx[b, c, i, j] = k
    return out_arr, idx_arr


def maxpool2x2_backward(real[:, :, :, ::1] grad, cnp.uint8_t[:, :, :, ::1] idx):
    """Route each pooled gradient to the recorded argmax position."""
    cdef Py_ssize_t B = grad.shape[0], C = grad.shape[1], Ho = grad.shape[2], Wo = grad.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, 2 * Ho, 2 * Wo), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    cdef cnp.uint8_t k
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        k = idx[b, c, i, j]
                        out[b, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = grad[b, c, i, j]
    return out_arr


cdef inline double _cubic(double t) nogil:
    # Catmull-Rom (a = -0.5)
    cdef double a = -0.5
    if t < 0:
        t = -t
    if t <= 1.0:
        return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    if t < 2.0:
        return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return 0.0


cdef inline Py_ssize_t _clamp(Py_ssize_t i, Py_ssize_t n) nogil:
    if i < 0:
        return 0
    if i >= n:
        return n - 1
    return i


def bicubic_resize(double[:, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w):
    """Resize a 2-D float64 array with align-corners Catmull-Rom, edge-clamped."""
    cdef Py_ssize_t in_h = src.shape[0], in_w = src.shape[1]
    out_arr = np.empty((out_h, out_w), dtype=np.float64)
    tmp_arr = np.empty((in_h, out_w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] tmp = tmp_arr
    cdef double sy = (in_h - 1.0) / (out_h - 1.0) if out_h > 1 else 0.0
    cdef double sx = (in_w - 1.0) / (out_w - 1.0) if out_w > 1 else 0.0
    cdef Py_ssize_t i, j, k, r, base
    cdef double pos, frac, acc
    with nogil:
        # time axis first, then frequency: same separable order as the fallback
        for j in range(out_w):
            pos = j * sx
            base = <Py_ssize_t>pos
            if base > in_w - 1:
                base = in_w - 1
            frac = pos - base
            for r in range(in_h):
                acc = 0.0
                for k in range(-1, 3):
                    acc = acc + _cubic(k - frac) * src[r, _clamp(base + k, in_w)]
                tmp[r, j] = acc
        for i in range(out_h):
            pos = i * sy
            base = <Py_ssize_t>pos
            if base > in_h - 1:
                base = in_h - 1
            frac = pos - base
            for j in range(out_w):
                acc = 0.0
                for k in range(-1, 3):
                    acc = acc + _cubic(k - frac) * tmp[_clamp(base + k, in_h), j]
                out[i, j] = acc
    return out_arr


def momentum_update(real[::1] w, real[::1] g, real[::1] m, double wd, double coef, double mu):
    """In place: m <- mu * m + coef * (g + wd * w); w <- w - m.

    One pass over memory instead of one per numpy operation. Each product and
    sum is rounded to ``real`` in the same order as the numpy twin.
    """
    cdef Py_ssize_t i, n = w.shape[0]
    cdef real wd_ = <real>wd, coef_ = <real>coef, mu_ = <real>mu, u
    with nogil:
        for i in range(n):
            u = w[i] * wd_
            u = u + g[i]
            u = u * coef_
            m[i] = m[i] * mu_
            m[i] = m[i] + u
            w[i] = w[i] - m[i]
