"""LARS with warmup + cosine decay for pretraining; Adam for downstream heads."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .tensor import kernels as K


@dataclass(frozen=True)
class LarsConfig:
    base_lr_weights: float = 0.2
    base_lr_biases: float = 0.0048
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001

    def __post_init__(self):
        if self.base_lr_weights <= 0 or self.base_lr_biases <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")

    def scaled(self, batch_size):
        """Base rates multiplied by batch_size / 256."""
        s = batch_size / 256.0
        return self.base_lr_weights * s, self.base_lr_biases * s

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: float = 10
    total_epochs: float = 100
    final_lr_fraction: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs < total_epochs")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.lr <= 0:
            raise ConfigError("Adam lr must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def lr_at(step, steps_per_epoch, cfg, base_lr):
    """Linear warmup to ``base_lr``, then cosine decay to ``base_lr * final_lr_fraction``.

    The decay ends at step ``total_epochs * steps_per_epoch``; later steps stay
    at the final rate. ``step`` may be fractional.
    """
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warm:
        return base_lr * step / warm
    final = base_lr * cfg.final_lr_fraction
    progress = min(1.0, (step - warm) / (total - warm))
    return final + (base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _check_grads(named):
    for name, t in named:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NumericalError(f"non-finite gradient for {name}; step aborted")


def is_excluded(name, tensor):
    """Biases and batch-norm parameters skip trust scaling and weight decay."""
    return tensor.ndim == 1


class Lars:
    """Layer-wise adaptive rate scaling on top of SGD with momentum.

    For adapted tensors: ``local = trust * ||w|| / (||g|| + wd * ||w||)``
    (1 when either norm is zero), ``m <- mu * m + local * lr * (g + wd * w)``,
    ``w <- w - m``. Excluded tensors use ``local = 1`` and no weight decay.
    """

    def __init__(self, named_params, cfg=LarsConfig(), adapt=True):
        self.named = list(named_params)
        self.cfg = cfg
        self.adapt = adapt
        self.momentum = {name: np.zeros_like(t.data) for name, t in self.named}

    def step(self, lr_weights, lr_biases=None):
        lr_biases = lr_weights if lr_biases is None else lr_biases
        _check_grads(self.named)
        cfg = self.cfg
        for name, t in self.named:
            g = t.grad
            if g is None:
                continue
            w = t.data
            if is_excluded(name, t):
                wd, coef = 0.0, lr_biases
            else:
                wd = cfg.weight_decay
                local = 1.0
                if self.adapt:
                    w_norm = float(np.linalg.norm(w))
                    g_norm = float(np.linalg.norm(g))
                    if w_norm > 0 and g_norm > 0:
                        local = cfg.trust_coefficient * w_norm / (g_norm + wd * w_norm)
                coef = local * lr_weights
            if not (w.flags.c_contiguous and w.flags.writeable):
                t.data = w = np.array(w, order="C")
            # fused and in place: the projector weights are 8192 x 8192
            K.momentum_update(w, g, self.momentum[name], wd, coef, cfg.momentum)

    def state_arrays(self):
        return {f"lars/{k}": v for k, v in self.momentum.items()}

    def load_state_arrays(self, arrays):
        for k in self.momentum:
            self.momentum[k] = arrays[f"lars/{k}"].astype(self.momentum[k].dtype, copy=True)


class Adam:
    """Bias-corrected Adam."""

    def __init__(self, named_params, cfg=AdamConfig()):
        self.named = list(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self):
        _check_grads(self.named)
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data = p.data - (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)
