"""Layer-level differentiable ops used by the encoder, projector and heads."""
import numpy as np

from ..errors import ShapeError
from . import kernels as K
from .core import Tensor, make_result


def conv2d(x, weight, bias=None):
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,Cin,H,W], got {x.shape}")
    B, C, H, W = x.shape
    Co = weight.shape[0]
    if weight.shape != (Co, C, 3, 3):
        raise ShapeError(f"conv2d weight: expected {(Co, C, 3, 3)}, got {weight.shape}")
    if bias is not None and bias.shape != (Co,):
        raise ShapeError(f"conv2d bias: expected {(Co,)}, got {bias.shape}")
    xd = x.data
    # patch columns are tap-major: (ky, kx, c)
    wm = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(Co, 9 * C)
    HW = H * W
    cols = K.im2col3x3(xd).reshape(B, HW, 9 * C)
    # one GEMM per sample writes [Co, H*W] rows, so the output is NCHW without a transposed copy
    out = np.matmul(wm, cols.transpose(0, 2, 1))
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, Co, H, W)

    # cols stay alive only while a tape holds this rule
    def rule(g):
        g3 = np.ascontiguousarray(g).reshape(B, Co, HW)
        dw = None
        if weight.requires_grad:
            dw = np.matmul(g3, cols).sum(axis=0)
            dw = np.ascontiguousarray(dw.reshape(Co, 3, 3, C).transpose(0, 3, 1, 2))
        db = g3.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(g3.transpose(0, 2, 1), wm)
            dx = K.col2im3x3(dcols.reshape(B * HW, 9 * C), B, C, H, W)
        return dx, dw, db

    inputs = (x, weight, bias if bias is not None else Tensor(np.zeros(Co, weight.dtype)))
    return make_result(out, inputs, rule, "conv2d")


def maxpool2d(x):
    """2x2 max pool with stride 2; gradient goes to the first maximal element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [B,C,H,W], got {x.shape}")
    H, W = x.shape[2:]
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {H}x{W}")
    out, idx = K.maxpool2x2_forward(x.data)
    return make_result(out, (x,), lambda g: (K.maxpool2x2_backward(g, idx),), "maxpool2d")


class BatchNormState:
    """Running statistics for one batch-norm layer (not trained by gradient)."""

    def __init__(self, n, dtype=np.float32):
        self.running_mean = np.zeros(n, dtype=dtype)
        self.running_var = np.ones(n, dtype=dtype)


def batchnorm(x, weight=None, bias=None, state=None, training=True, eps=1e-5, momentum=0.1):
    """Batch normalization.

    4-D input is normalized per channel over (B, H, W); 2-D or 3-D input per
    feature over all leading axes. ``weight``/``bias`` of None means no affine.
    """
    if x.ndim == 4:
        axes, bshape, sub = (0, 2, 3), (1, -1, 1, 1), "bchw,bchw->c"
    elif x.ndim in (2, 3):
        axes = tuple(range(x.ndim - 1))
        bshape = (1,) * (x.ndim - 1) + (-1,)
        sub = "bd,bd->d" if x.ndim == 2 else "btd,btd->d"
    else:
        raise ShapeError(f"batchnorm expects 2-D, 3-D or 4-D input, got {x.shape}")
    n_feat = x.shape[1] if x.ndim == 4 else x.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (n_feat,):
            raise ShapeError(f"batchnorm param shape {p.shape} != ({n_feat},)")
    xd = x.data
    dt = xd.dtype
    n = xd.size // n_feat
    gamma = weight.data if weight is not None else np.ones(n_feat, dt)
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm in training mode needs batch size >= 2")
        mean = xd.mean(axis=axes)
        out = xd - mean.reshape(bshape)
        var = np.einsum(sub, out, out) / n
        inv_std = (1.0 / np.sqrt(var + eps)).astype(dt)
        if state is not None:
            m = momentum
            state.running_mean *= 1 - m
            state.running_mean += (m * mean).astype(state.running_mean.dtype)
            state.running_var *= 1 - m
            state.running_var += (m * var * n / (n - 1)).astype(state.running_var.dtype)
    else:
        if state is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mean = state.running_mean.astype(dt)
        inv_std = (1.0 / np.sqrt(state.running_var + eps)).astype(dt)
        out = xd - mean.reshape(bshape)
    scale = (gamma * inv_std).astype(dt)
    out *= scale.reshape(bshape)
    if bias is not None:
        out += bias.data.reshape(bshape)

    def rule(g):
        xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
        sg = g.sum(axis=axes)
        sgx = np.einsum(sub, g, xhat)
        dgamma = sgx if weight is not None and weight.requires_grad else None
        dbeta = sg if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            if training:
                xhat *= (sgx / n).reshape(bshape)
                dx = g - xhat
                dx -= (sg / n).reshape(bshape)
                dx *= scale.reshape(bshape)
            else:
                dx = g * scale.reshape(bshape)
        return dx, dgamma, dbeta

    dummy = Tensor(np.zeros(n_feat, dt))
    inputs = (x, weight if weight is not None else dummy, bias if bias is not None else dummy)
    return make_result(out, inputs, rule, "batchnorm")


def linear(x, weight, bias=None):
    """Affine map over the last axis; leading axes are batch axes."""
    Dout, Din = weight.shape
    if x.shape[-1] != Din:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != weight in-dim {Din}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, Din)
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        if bias.shape != (Dout,):
            raise ShapeError(f"linear bias: expected {(Dout,)}, got {bias.shape}")
        out += bias.data

    def rule(g):
        g2 = g.reshape(-1, Dout)
        dx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        dw = g2.T @ x2 if weight.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    inputs = (x, weight, bias if bias is not None else Tensor(np.zeros(Dout, wd.dtype)))
    return make_result(out.reshape(lead + (Dout,)), inputs, rule, "linear")


def relu(x):
    xd = x.data
    mask = xd > 0
    return make_result(np.maximum(xd, xd.dtype.type(0)), (x,), lambda g: (g * mask,), "relu")


def dropout(x, rate, training, rng):
    """Inverted dropout; identity (same object) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape, dtype=x.dtype) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def temporal_pool(x):
    """[B,T,D] -> [B,D]: max over time plus mean over time."""
    if x.ndim != 3:
        raise ShapeError(f"temporal_pool expects [B,T,D], got {x.shape}")
    B, T, D = x.shape
    xd = x.data
    idx = xd.argmax(axis=1)
    out = np.take_along_axis(xd, idx[:, None, :], axis=1)[:, 0, :] + xd.mean(axis=1)

    def rule(g):
        dx = np.broadcast_to((g / T)[:, None, :], (B, T, D)).copy()
        bi, di = np.meshgrid(np.arange(B), np.arange(D), indexing="ij")
        dx[bi, idx, di] += g
        return (dx,)

    return make_result(out, (x,), rule, "temporal_pool")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of [B,K] logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    B = labels.shape[0]
    loss = -logp[np.arange(B), labels].mean()

    def rule(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), rule, "cross_entropy")
