"""Cross-correlation objective between the embeddings of two augmented views."""
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .tensor import Tensor
from .tensor.core import make_result

DEFAULT_LAMBDA = 0.0051


@dataclass
class LossBreakdown:
    invariance: float
    redundancy: float
    lam: float
    total: float
    loss: Tensor = None  # differentiable total, for backward()
    c_diag: np.ndarray = None  # diagonal of C, when computed

    def as_dict(self):
        return {"invariance": self.invariance, "redundancy": self.redundancy, "total": self.total}


def cross_correlation(z_a, z_b):
    """C[i, j] = sum_b za[b,i] zb[b,j] / (||za[:,i]|| ||zb[:,j]||), norms taken over the batch.

    Differentiable in both inputs. Raises NumericalError if any embedding
    column is identically zero (collapsed embeddings).
    """
    na, nb = _normalize_columns(z_a, z_b)
    return na.T @ nb


def _normalize_columns(z_a, z_b):
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ShapeError(f"cross_correlation needs equal [B,D] inputs, got {z_a.shape} and {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ShapeError("cross_correlation needs a batch of at least 2")
    normed = []
    for name, z in (("A", z_a), ("B", z_b)):
        norm_sq = (z * z).sum(axis=0)
        zero = np.flatnonzero(norm_sq.data == 0)
        if zero.size:
            raise NumericalError(f"embedding column {int(zero[0])} of view {name} is identically zero")
        normed.append(z / norm_sq.sqrt())
    return normed


def _offdiag_sq_sum(c):
    off = c.data.copy()
    np.fill_diagonal(off, 0)
    return make_result(np.asarray((off * off).sum()), (c,), lambda g: (2.0 * g * off,), "offdiag_sq_sum")


def barlow_loss(c, lam=DEFAULT_LAMBDA):
    """Invariance term sum_i (1 - C_ii)^2 plus lam times sum_{i != j} C_ij^2."""
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"barlow_loss needs a square matrix, got {c.shape}")
    inv = ((1.0 - c.diagonal()) ** 2).sum()
    red = _offdiag_sq_sum(c)
    total = inv + red * lam
    inv_f, red_f = float(inv.data), float(red.data)
    return LossBreakdown(inv_f, red_f, lam, inv_f + lam * red_f, total)


def barlow_loss_from_embeddings(z_a, z_b, lam=DEFAULT_LAMBDA):
    """Same loss as ``barlow_loss(cross_correlation(z_a, z_b), lam)`` without forming C.

    With column-normalized views na, nb ([B, D]) and Gram matrices
    Ga = na na^T, Gb = nb nb^T, the squared entries of C = na^T nb sum to
    sum(Ga * Gb), and the gradients of the redundancy term are Ga nb and
    Gb na. Everything costs O(B^2 D) instead of O(B D^2), which matters once
    D is in the thousands. The diagonal of C is returned as ``c_diag``.
    """
    na, nb = _normalize_columns(z_a, z_b)
    a, b = na.data, nb.data
    # scalars accumulate in float64; B x B Grams are cheap
    ga = a.astype(np.float64) @ a.T.astype(np.float64)
    gb = b.astype(np.float64) @ b.T.astype(np.float64)
    d = np.einsum("bi,bi->i", a.astype(np.float64), b.astype(np.float64))
    inv_f = float(((1.0 - d) ** 2).sum())
    red_f = float((ga * gb).sum() - (d * d).sum())
    w = (-2.0 * (1.0 - d) - 2.0 * lam * d).astype(a.dtype)
    ga32, gb32 = ga.astype(a.dtype), gb.astype(a.dtype)

    def rule(g):
        g = float(g)
        da = g * (2.0 * lam * (gb32 @ a) + b * w)
        db = g * (2.0 * lam * (ga32 @ b) + a * w)
        return da.astype(a.dtype, copy=False), db.astype(b.dtype, copy=False)

    total_f = inv_f + lam * red_f
    total = make_result(np.asarray(total_f, dtype=a.dtype), (na, nb), rule, "barlow_loss")
    out = LossBreakdown(inv_f, red_f, lam, total_f, total)
    out.c_diag = d
    return out


def correlation_extrema(z_a, z_b, chunk=1024):
    """(min, max) of C without holding all of it; for diagnostics."""
    a = np.asarray(z_a, dtype=np.float64)
    b = np.asarray(z_b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = a / np.linalg.norm(a, axis=0)
        b = b / np.linalg.norm(b, axis=0)
    lo, hi = np.inf, -np.inf
    for i in range(0, a.shape[1], chunk):
        blk = a[:, i:i + chunk].T @ b
        lo, hi = min(lo, float(np.min(blk))), max(hi, float(np.max(blk)))
    return lo, hi


def signal_cross_covariance(x, y, tau=0):
    """Lagged sample cross-covariance of two equal-length series.

    Pairs x[t - tau] with y[t]; terms where x[t - tau] falls outside the
    series are dropped while the 1/(N-1) normalizer is kept.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"series must be 1-D and equal length, got {x.shape} and {y.shape}")
    if n < 2:
        raise ValueError("need at least 2 samples")
    if abs(tau) >= n:
        raise ValueError(f"|tau| must be < N={n}, got {tau}")
    dx = x - x.mean()
    dy = y - y.mean()
    if tau >= 0:
        s = np.dot(dx[: n - tau], dy[tau:])
    else:
        s = np.dot(dx[-tau:], dy[: n + tau])
    return s / (n - 1)


def signal_cross_correlation(x, y, tau=0):
    """Cross-covariance at lag tau normalized by the zero-lag auto-covariances."""
    sxx = signal_cross_covariance(x, x, 0)
    syy = signal_cross_covariance(y, y, 0)
    if sxx == 0 or syy == 0:
        raise NumericalError("cross-correlation undefined for a constant series")
    return signal_cross_covariance(x, y, tau) / np.sqrt(sxx * syy)
