"""Audio ConvNet encoder, projection head and linear classifier.

Encoder (input [B, 1, 64, 96]):

    3 x (conv3x3@64 -> BN2d -> ReLU -> maxpool 2x2)   -> [B, 64, 8, 12]
    reshape (time to axis 1; channel-major, then freq) -> [B, 12, 512]
    linear 2048 -> ReLU -> dropout 0.3 -> linear 2048 -> ReLU
    max over time + mean over time                     -> [B, 2048]

Projector: dropout -> linear D -> BN1d -> ReLU -> linear D -> BN1d (no affine).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm,
    conv2d,
    dropout,
    linear,
    maxpool2d,
    relu,
    temporal_pool,
)


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 64
    channels: int = 64
    hidden: int = 2048
    proj_dim: int = 8192
    dropout: float = 0.3
    proj_dropout: float = 0.3
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def to_dict(self):
        return asdict(self)


def _he_normal(rng, shape, fan_in, dtype):
    # draw directly in the target precision; the 8192 x 8192 layers are large
    w = rng.standard_normal(shape, dtype=np.dtype(dtype))
    w *= np.sqrt(2.0 / fan_in)
    return w


class Params:
    """Ordered name -> Tensor mapping plus batch-norm running statistics."""

    def __init__(self):
        self.tensors = {}
        self.bn = {}

    def add(self, name, data):
        self.tensors[name] = Tensor(data, requires_grad=True, name=name)
        return self.tensors[name]

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def count(self):
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def set_requires_grad(self, flag):
        for t in self.tensors.values():
            t.requires_grad = flag

    def arrays(self, prefix=""):
        """Flat dict of every array, including running statistics."""
        out = {prefix + k: t.data for k, t in self.tensors.items()}
        for k, st in self.bn.items():
            out[f"{prefix}{k}.running_mean"] = st.running_mean
            out[f"{prefix}{k}.running_var"] = st.running_var
        return out

    def load_arrays(self, arrays, prefix=""):
        for k, t in self.tensors.items():
            a = arrays[prefix + k]
            if a.shape != t.shape:
                raise ShapeError(f"{prefix}{k}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.astype(t.dtype, copy=True)
        for k, st in self.bn.items():
            for field in ("running_mean", "running_var"):
                a = arrays[f"{prefix}{k}.{field}"]
                if a.shape != getattr(st, field).shape:
                    raise ShapeError(f"{prefix}{k}.{field}: shape {a.shape} mismatch")
                setattr(st, field, a.astype(getattr(st, field).dtype, copy=True))


class Encoder:
    """The three-block ConvNet with the two-layer temporal MLP on top."""

    def __init__(self, cfg=ModelConfig(), rng=None, dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        self.cfg = cfg
        self.dtype = dtype
        c = cfg.channels
        if cfg.n_mels % 8:
            raise ShapeError("n_mels must be divisible by 8 (three 2x pools)")
        self.params = p = Params()
        c_in = 1
        for i in (1, 2, 3):
            p.add(f"conv{i}.weight", _he_normal(rng, (c, c_in, 3, 3), c_in * 9, dtype))
            p.add(f"conv{i}.bias", np.zeros(c, dtype))
            p.add(f"bn{i}.weight", np.ones(c, dtype))
            p.add(f"bn{i}.bias", np.zeros(c, dtype))
            p.bn[f"bn{i}"] = BatchNormState(c, dtype)
            c_in = c
        flat = c * (cfg.n_mels // 8)
        p.add("fc1.weight", _he_normal(rng, (cfg.hidden, flat), flat, dtype))
        p.add("fc1.bias", np.zeros(cfg.hidden, dtype))
        p.add("fc2.weight", _he_normal(rng, (cfg.hidden, cfg.hidden), cfg.hidden, dtype))
        p.add("fc2.bias", np.zeros(cfg.hidden, dtype))

    @property
    def out_dim(self):
        return self.cfg.hidden

    def expected_input(self, batch, frames):
        return (batch, 1, self.cfg.n_mels, frames)

    def forward(self, x, training=False, rng=None, trace=None):
        """x: [B, 1, n_mels, T] with T divisible by 8. ``trace`` collects (layer, shape)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.cfg.n_mels or x.shape[3] % 8:
            raise ShapeError(
                f"encoder expects [B, 1, {self.cfg.n_mels}, T] with T % 8 == 0 "
                f"(e.g. [B, 1, 64, 96]); got {list(x.shape)}"
            )
        p, cfg = self.params, self.cfg
        log = trace.append if trace is not None else (lambda item: None)
        layer = 0
        h = x
        for i in (1, 2, 3):
            h = conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            log((f"Conv2D-{layer + 1}", h.shape))
            h = batchnorm(h, p[f"bn{i}.weight"], p[f"bn{i}.bias"], p.bn[f"bn{i}"],
                          training, cfg.bn_eps, cfg.bn_momentum)
            log((f"BatchNorm2D-{layer + 2}", h.shape))
            h = relu(h)
            log((f"ReLU-{layer + 3}", h.shape))
            h = maxpool2d(h)
            log((f"MaxPool2D-{layer + 4}", h.shape))
            layer += 4
        B, C, Fq, T = h.shape
        # [B, C, F, T] -> [B, T, C, F] -> [B, T, C*F]; feature index = c * F + f
        h = h.transpose(0, 3, 1, 2).reshape(B, T, C * Fq)
        log(("Reshape-13", h.shape))
        h = linear(h, p["fc1.weight"], p["fc1.bias"])
        log(("Linear-14", h.shape))
        h = relu(h)
        log(("ReLU-15", h.shape))
        h = dropout(h, cfg.dropout, training, rng)
        log(("Dropout-16", h.shape))
        h = linear(h, p["fc2.weight"], p["fc2.bias"])
        log(("Linear-17", h.shape))
        h = relu(h)
        log(("ReLU-18", h.shape))
        h = temporal_pool(h)
        log(("max+mean-19", h.shape))
        return h

    __call__ = forward


class Projector:
    """Projection head used only for pretraining."""

    def __init__(self, cfg=ModelConfig(), rng=None, dtype=np.float32):
        rng = np.random.default_rng(1) if rng is None else rng
        self.cfg = cfg
        self.dtype = dtype
        d, h = cfg.proj_dim, cfg.hidden
        self.params = p = Params()
        # no biases: each linear feeds a batch norm that would cancel them
        p.add("p1.weight", _he_normal(rng, (d, h), h, dtype))
        p.add("pbn1.weight", np.ones(d, dtype))
        p.add("pbn1.bias", np.zeros(d, dtype))
        p.bn["pbn1"] = BatchNormState(d, dtype)
        p.add("p2.weight", _he_normal(rng, (d, d), d, dtype))
        p.bn["pbn2"] = BatchNormState(d, dtype)

    def forward(self, h, training=True, rng=None):
        if h.ndim != 2 or h.shape[1] != self.cfg.hidden:
            raise ShapeError(f"projector expects [B, {self.cfg.hidden}], got {list(h.shape)}")
        if training and h.shape[0] < 2:
            raise ShapeError("projector in training mode needs batch size >= 2")
        p, cfg = self.params, self.cfg
        z = dropout(h, cfg.proj_dropout, training, rng)
        z = linear(z, p["p1.weight"])
        z = batchnorm(z, p["pbn1.weight"], p["pbn1.bias"], p.bn["pbn1"], training,
                      cfg.bn_eps, cfg.bn_momentum)
        z = relu(z)
        z = linear(z, p["p2.weight"])
        return batchnorm(z, None, None, p.bn["pbn2"], training, cfg.bn_eps, cfg.bn_momentum)

    __call__ = forward


class ClassifierHead:
    """Single linear layer from the 2048-d embedding to class logits."""

    def __init__(self, in_dim, num_classes, rng=None, dtype=np.float32, zero=False):
        rng = np.random.default_rng(2) if rng is None else rng
        self.num_classes = num_classes
        self.params = p = Params()
        if zero:
            w = np.zeros((num_classes, in_dim), dtype)
        else:
            # default uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for linear heads
            bound = 1.0 / np.sqrt(in_dim)
            w = rng.uniform(-bound, bound, (num_classes, in_dim)).astype(dtype)
        p.add("head.weight", w)
        p.add("head.bias", np.zeros(num_classes, dtype))

    def forward(self, h):
        return classify(h, self)

    __call__ = forward


def classify(h, head):
    w = head.params["head.weight"]
    if h.shape[-1] != w.shape[1]:
        raise ShapeError(f"classifier expects {w.shape[1]}-d features, got {h.shape[-1]}")
    return linear(h, w, head.params["head.bias"])


TABLE1_OUTPUTS = [
    ("Conv2D-1", (64, 64, 96)),
    ("BatchNorm2D-2", (64, 64, 96)),
    ("ReLU-3", (64, 64, 96)),
    ("MaxPool2D-4", (64, 32, 48)),
    ("Conv2D-5", (64, 32, 48)),
    ("BatchNorm2D-6", (64, 32, 48)),
    ("ReLU-7", (64, 32, 48)),
    ("MaxPool2D-8", (64, 16, 24)),
    ("Conv2D-9", (64, 16, 24)),
    ("BatchNorm2D-10", (64, 16, 24)),
    ("ReLU-11", (64, 16, 24)),
    ("MaxPool2D-12", (64, 8, 12)),
    ("Reshape-13", (12, 512)),
    ("Linear-14", (12, 2048)),
    ("ReLU-15", (12, 2048)),
    ("Dropout-16", (12, 2048)),
    ("Linear-17", (12, 2048)),
    ("ReLU-18", (12, 2048)),
    ("max+mean-19", (2048,)),
]
"""Per-sample output shapes of each encoder layer for a [B, 1, 64, 96] input."""
