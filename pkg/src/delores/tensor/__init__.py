"""Minimal tensor library: the ops the encoder, projector and loss need."""
import contextlib

from .core import Tape, Tensor, as_tensor, backward, no_grad
from .kernels import BACKEND
from .ops import (
    BatchNormState,
    batchnorm,
    conv2d,
    cross_entropy,
    dropout,
    linear,
    maxpool2d,
    relu,
    temporal_pool,
)


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS to one thread so runs are reproducible bit-for-bit."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


__all__ = [
    "BACKEND", "BatchNormState", "Tape", "Tensor", "as_tensor", "backward",
    "batchnorm", "conv2d", "cross_entropy", "dropout", "linear", "maxpool2d",
    "no_grad", "relu", "single_threaded", "temporal_pool",
]
