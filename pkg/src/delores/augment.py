"""Spectrogram augmentations producing the two views of each training batch.

Each view runs normalize -> mixup -> random resized crop with its own random
draws. Mixup works in the linear domain: ``exp`` of the (normalized) log
values is mixed and the result mapped back with ``log``.
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import kernels


@dataclass(frozen=True)
class NormStats:
    mu: float
    nu: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError(f"normalization std must be positive, got {self.nu}")

    @classmethod
    def from_arrays(cls, arrays):
        """Mean and standard deviation over every value of every array."""
        total = 0.0
        total_sq = 0.0
        count = 0
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            total += a.sum()
            count += a.size
        mu = total / count
        for a in arrays:
            d = np.asarray(a, dtype=np.float64) - mu
            total_sq += (d * d).sum()
        return cls(float(mu), float(np.sqrt(total_sq / count)))


@dataclass(frozen=True)
class AugmentConfig:
    mixup_queue_size: int = 2048
    mix_ratio_max: float = 0.4
    freq_range: tuple = (0.6, 1.5)
    time_range: tuple = (0.6, 1.5)
    virtual_time_factor: float = 1.5

    def __post_init__(self):
        h1, h2 = self.freq_range
        w1, w2 = self.time_range
        if not (0 < h1 <= h2 and 0 < w1 <= w2):
            raise ConfigError("crop ranges must satisfy 0 < low <= high")
        if not 0 <= self.mix_ratio_max < 1:
            raise ConfigError("mix_ratio_max must be in [0, 1)")
        if self.mixup_queue_size < 1:
            raise ConfigError("mixup_queue_size must be >= 1")
        if self.virtual_time_factor < 1:
            raise ConfigError("virtual_time_factor must be >= 1")


def normalize(x, stats):
    if not stats.nu > 0:
        raise ConfigError(f"normalization std must be positive, got {stats.nu}")
    return (x - stats.mu) / stats.nu


class MixupQueue:
    """Bounded FIFO of past linear-domain spectrograms.

    A queue is meant to be owned by one worker. Pass ``locked=True`` to guard
    push and sample with a mutex when several threads share one.
    """

    def __init__(self, maxlen=2048, locked=False):
        self.maxlen = maxlen
        self._items = deque(maxlen=maxlen)
        self._lock = threading.Lock() if locked else None

    def __len__(self):
        return len(self._items)

    def _guard(self):
        return self._lock if self._lock is not None else _NullLock

    def push(self, linear_spec):
        with self._guard():
            self._items.append(np.array(linear_spec, copy=True))

    def sample(self, rng):
        with self._guard():
            if not self._items:
                return None
            return self._items[int(rng.integers(len(self._items)))]

    def items(self):
        with self._guard():
            return list(self._items)

    def as_array(self):
        items = self.items()
        if not items:
            return None
        return np.stack(items)

    def load_array(self, arr):
        with self._guard():
            self._items.clear()
            if arr is not None:
                for a in arr:
                    self._items.append(np.array(a, copy=True))


class _NullLockType:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NullLock = _NullLockType()


def mixup_with(x, partner, r):
    """log((1 - r) exp(x) + r exp(partner))."""
    if partner.shape != x.shape:
        raise ShapeError(f"mixup partner shape {partner.shape} != input shape {x.shape}")
    return np.log((1.0 - r) * np.exp(x) + r * partner)


def mixup(x, queue, rng, mix_ratio_max=0.4, ratio=None):
    """Mix a random past input into log-domain ``x``; then enqueue ``exp(x)``.

    ``ratio`` pins the mixing ratio (otherwise drawn from U(0, mix_ratio_max)).
    An empty queue leaves ``x`` unchanged.
    """
    x = np.asarray(x)
    partner = queue.sample(rng)
    r = 0.0
    if partner is not None:
        r = rng.uniform(0.0, mix_ratio_max) if ratio is None else ratio
    if r == 0.0:
        out = x.copy()  # skip the exp/log round trip
    else:
        out = mixup_with(x, partner, r).astype(x.dtype)
    queue.push(np.exp(x))
    return out


def crop_size(F, T, cfg, rng):
    """Crop height/width from U(h1,h2) (clamped to 1) and U(w1,w2)."""
    h = min(rng.uniform(*cfg.freq_range), 1.0)
    w = rng.uniform(*cfg.time_range)
    return int(np.floor(h * F)), int(np.floor(w * T))


def random_resized_crop(spec, cfg, rng, size=None, offset=None):
    """Crop inside a time-padded virtual canvas and resize back to [F, T].

    The canvas is ``floor(virtual_time_factor * T)`` frames wide with the
    spectrogram centered in it and zeros on either side; the frequency axis is
    never padded. ``size=(F_c, T_c)`` and ``offset=(i, j)`` override the
    random draws (``offset`` is in canvas coordinates).
    """
    spec = np.asarray(spec)
    F, T = spec.shape
    if F < 4 or T < 4:
        raise ShapeError(f"random_resized_crop needs at least 4x4 input, got {spec.shape}")
    Tv = int(np.floor(cfg.virtual_time_factor * T))
    canvas = np.zeros((F, Tv), dtype=np.float64)
    x0 = (Tv - T) // 2
    canvas[:, x0:x0 + T] = spec
    fc, tc = crop_size(F, T, cfg, rng) if size is None else size
    if fc < 1 or tc < 1:
        raise ConfigError(f"crop size {fc}x{tc} is empty; crop ranges too small for {F}x{T} input")
    fc = min(fc, F)
    tc = min(tc, Tv)
    if offset is None:
        i = int(rng.integers(0, F - fc + 1))
        j = int(rng.integers(0, Tv - tc + 1))
    else:
        i, j = offset
    crop = canvas[i:i + fc, j:j + tc]
    return kernels.bicubic_resize(crop, F, T).astype(spec.dtype)


def virtual_width(T, cfg=AugmentConfig()):
    return int(np.floor(cfg.virtual_time_factor * T))


def augment_one(x, stats, queue, cfg, rng):
    y = normalize(x, stats)
    y = mixup(y, queue, rng, cfg.mix_ratio_max)
    return random_resized_crop(y, cfg, rng)


def make_views(batch, stats, queue_a, queue_b, rng, cfg=AugmentConfig()):
    """Two independently augmented copies of a batch of [F, T] log-mel crops.

    ``batch`` is [B, F, T] (or [B, 1, F, T]); outputs keep its shape. The
    A-branch draws come from one child generator and the B-branch from
    another, both spawned from ``rng``.
    """
    batch = np.asarray(batch)
    squeeze = batch.ndim == 4
    specs = batch[:, 0] if squeeze else batch
    rng_a, rng_b = rng.spawn(2)
    xa = np.stack([augment_one(s, stats, queue_a, cfg, rng_a) for s in specs])
    xb = np.stack([augment_one(s, stats, queue_b, cfg, rng_b) for s in specs])
    if squeeze:
        xa, xb = xa[:, None], xb[:, None]
    return xa, xb
