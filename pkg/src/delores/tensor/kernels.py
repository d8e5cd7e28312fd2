"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback
is used. ``DELORES_BACKEND=python`` forces the fallback, ``=compiled`` makes a
missing extension an ImportError instead of a silent downgrade.
"""
import os

import numpy as np

from . import _fallback

_requested = os.environ.get("DELORES_BACKEND", "auto").lower()

_ext = None
if _requested != "python":
    try:
        from . import _ext  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "compiled":
            raise

BACKEND = "compiled" if _ext is not None else "python"

_FUNCS = ("im2col3x3", "col2im3x3", "maxpool2x2_forward", "maxpool2x2_backward", "bicubic_resize",
          "momentum_update")


def get_backend(name=None):
    """Return a namespace dict of kernel functions for ``name`` (default: active)."""
    name = name or BACKEND
    if name == "compiled":
        if _ext is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        mod = _ext
    elif name == "python":
        mod = _fallback
    else:
        raise ValueError(f"unknown backend {name!r}")
    return {f: getattr(mod, f) for f in _FUNCS}


_active = get_backend()


def im2col3x3(x):
    return _active["im2col3x3"](np.ascontiguousarray(x))


def col2im3x3(cols, B, C, H, W):
    return _active["col2im3x3"](np.ascontiguousarray(cols), B, C, H, W)


def momentum_update(w, g, m, wd, coef, mu):
    """In place on contiguous ``w`` and ``m``: m <- mu*m + coef*(g + wd*w), w <- w - m."""
    if not (w.flags.c_contiguous and m.flags.c_contiguous and w.flags.writeable and m.flags.writeable):
        raise ValueError("momentum_update needs writeable contiguous w and m")
    if not (w.shape == g.shape == m.shape and w.dtype == m.dtype):
        raise ValueError("momentum_update needs equal shapes and matching w/m dtypes")
    g = np.ascontiguousarray(g, dtype=w.dtype)
    _active["momentum_update"](w.reshape(-1), g.reshape(-1), m.reshape(-1), float(wd), float(coef), float(mu))


def maxpool2x2_forward(x):
    return _active["maxpool2x2_forward"](np.ascontiguousarray(x))


def maxpool2x2_backward(grad, idx):
    return _active["maxpool2x2_backward"](np.ascontiguousarray(grad), np.ascontiguousarray(idx))


def bicubic_resize(src, out_h, out_w):
    src = np.ascontiguousarray(src, dtype=np.float64)
    return _active["bicubic_resize"](src, int(out_h), int(out_w))
