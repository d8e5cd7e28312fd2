"""Pure-numpy versions of the compiled kernels in ``_ext.pyx``.

Signatures and accumulation order mirror the extension so that switching
backends does not change results.
"""
import numpy as np


def im2col3x3(x):
    B, C, H, W = x.shape
    xp = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, H, W, 3, 3, C), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky, kx] = xp[:, ky:ky + H, kx:kx + W]
    return cols.reshape(B * H * W, 9 * C)


def col2im3x3(cols, B, C, H, W):
    d = cols.reshape(B, H, W, 3, 3, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + H, kx:kx + W] += d[:, :, :, ky, kx]
    return np.ascontiguousarray(dxp[:, 1:-1, 1:-1].transpose(0, 3, 1, 2))


def _windows(x):
    B, C, H, W = x.shape
    return (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )


def maxpool2x2_forward(x):
    win = _windows(x)
    # np.argmax returns the first maximal entry, which is the tie-break we want
    idx = win.argmax(axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad, idx):
    B, C, Ho, Wo = grad.shape
    win = np.zeros((B, C, Ho, Wo, 4), dtype=grad.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad[..., None], axis=-1)
    out = win.reshape(B, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out.reshape(B, C, 2 * Ho, 2 * Wo))


def cubic_weight(t):
    """Catmull-Rom kernel (a = -0.5) evaluated elementwise."""
    a = -0.5
    t = np.abs(t)
    near = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    far = ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _taps(n_in, n_out):
    scale = (n_in - 1.0) / (n_out - 1.0) if n_out > 1 else 0.0
    pos = np.arange(n_out) * scale
    base = np.minimum(pos.astype(np.intp), n_in - 1)
    frac = pos - base
    return [
        (cubic_weight(k - frac), np.clip(base + k, 0, n_in - 1))
        for k in range(-1, 3)
    ]


def bicubic_resize(src, out_h, out_w):
    in_h, in_w = src.shape
    tmp = np.zeros((in_h, out_w))
    for w, idx in _taps(in_w, out_w):
        tmp += w[None, :] * src[:, idx]
    out = np.zeros((out_h, out_w))
    for w, idx in _taps(in_h, out_h):
        out += w[:, None] * tmp[idx, :]
    return out


def momentum_update(w, g, m, wd, coef, mu):
    # scalars round to the array dtype, matching the compiled loop
    dt = w.dtype.type
    u = np.multiply(w, dt(wd))
    u += g
    u *= dt(coef)
    m *= dt(mu)
    m += u
    w -= m
