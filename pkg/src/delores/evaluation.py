"""Downstream protocols: linear probe on frozen embeddings and end-to-end finetuning.

Both protocols feed fixed, unaugmented crops (``frames`` wide, starting at
frame 0) normalized with statistics of the downstream train split, train
with Adam, and keep the weights from the epoch with the best validation
accuracy (ties keep the earlier epoch). Epoch 0 is the untrained state, so
``max_epochs=0`` reports the untrained head.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data
from .augment import NormStats, normalize
from .errors import ConfigError, DataError
from .model import ClassifierHead, Encoder, ModelConfig, classify
from .optim import Adam, AdamConfig
from .tensor import Tape, Tensor, backward, no_grad
from .tensor.ops import cross_entropy

SPLITS = ("train", "val", "test")


@dataclass
class EvalReport:
    task: str
    protocol: str
    init: str
    accuracy: dict
    epochs_run: int
    best_epoch: int
    selection: str = "best validation accuracy; ties keep the earlier epoch"
    history: list = field(default_factory=list)

    def __post_init__(self):
        for split, acc in self.accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy for {split} outside [0, 1]: {acc}")

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def table(self):
        return format_table([self])


def format_table(reports):
    """Aligned text table, one row per report, accuracy columns in percent."""
    header = ["task", "protocol", "init"] + [s for s in SPLITS] + ["best_epoch"]
    rows = []
    for r in reports:
        accs = [f"{100 * r.accuracy[s]:.1f}" if s in r.accuracy else "-" for s in SPLITS]
        rows.append([r.task, r.protocol, r.init] + accs + [str(r.best_epoch)])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


# -- inputs -------------------------------------------------------------------

@dataclass
class Downstream:
    """Normalized fixed-crop inputs and labels for every non-empty split."""

    inputs: dict
    labels: dict
    num_classes: int
    frames: int
    stats: NormStats


def prepare(manifest, frames=None, store=None, stats=None, batch_size=64):
    """Load, crop and normalize every labeled split once."""
    store = data.FeatureStore(manifest) if store is None else store
    if manifest.num_classes < 2:
        raise DataError("downstream task needs at least 2 labels")
    frames = data.downstream_frames(manifest, "train", store.cfg) if frames is None else frames
    if stats is None:
        stats = NormStats.from_arrays(store.get_many(manifest.split("train")))
    inputs, labels = {}, {}
    for split in SPLITS:
        recs = manifest.split(split)
        if not recs:
            continue
        if any(r.label is None for r in recs):
            raise DataError(f"split {split!r} has unlabeled records")
        xs, ys = [], []
        for b in data.batch_iter(manifest, split, batch_size, frames, "supervised",
                                 np.random.default_rng(0), store, shuffle=False):
            xs.append(normalize(b.features, stats))
            ys.append(b.labels)
        inputs[split] = np.concatenate(xs).astype(np.float32)
        labels[split] = np.concatenate(ys)
    if "train" not in inputs:
        raise DataError("downstream task has no train split")
    return Downstream(inputs, labels, manifest.num_classes, frames, stats)


def embed(encoder, x, batch_size=64):
    """Eval-mode 2048-d embeddings of ``x`` ([N, 1, F, T]) without gradient tracking."""
    n = x.shape[0]
    out = np.empty((n, encoder.out_dim), dtype=encoder.dtype)
    with no_grad():
        for s in range(0, n, batch_size):
            out[s:s + batch_size] = encoder(Tensor(x[s:s + batch_size]), False).data
    return out


def accuracy(logits, labels):
    if len(labels) == 0:
        raise DataError("cannot score an empty split")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(encoder, head, x, labels, batch_size=64):
    """Top-1 accuracy with eval-mode encoder and head; partial batches kept."""
    if x is None or len(x) == 0:
        raise DataError("cannot evaluate on an empty split")
    _check_head(head, labels)
    logits = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            h = encoder(Tensor(x[s:s + batch_size]), False)
            logits.append(classify(h, head).data)
    return accuracy(np.concatenate(logits), labels)


def _check_head(head, labels, num_classes=None):
    k = head.num_classes
    if num_classes is not None and num_classes != k:
        raise ConfigError(f"head has {k} outputs but the task has {num_classes} labels")
    if len(labels) and labels.max() >= k:
        raise ConfigError(f"label index {labels.max()} out of range for a {k}-way head")


def random_encoder(model_cfg=ModelConfig(), seed=0, dtype=np.float32):
    """Freshly initialized encoder (the random-init baseline)."""
    return Encoder(model_cfg, np.random.default_rng([seed, 3]), dtype)


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# -- protocols ----------------------------------------------------------------

def linear_probe(encoder, task, adam_cfg=AdamConfig(), seed=0, name="task", init="pretrained",
                 head=None):
    """Train a linear head on frozen embeddings; returns an :class:`EvalReport`.

    Embeddings are computed once per split (the encoder is never touched
    again). The head starts at zero unless ``head`` is given.
    """
    if head is None:
        head = ClassifierHead(encoder.out_dim, task.num_classes, dtype=encoder.dtype, zero=True)
    _check_head(head, task.labels["train"], task.num_classes)
    feats = {s: embed(encoder, x, adam_cfg.batch_size) for s, x in task.inputs.items()}
    named = list(head.params.items())
    opt = Adam(named, adam_cfg)
    rng = np.random.default_rng([seed, 4])

    def scores():
        with no_grad():
            return {s: accuracy(classify(Tensor(f), head).data, task.labels[s]) for s, f in feats.items()}

    def snapshot():
        return {k: t.data.copy() for k, t in named}

    sel = "val" if "val" in feats else "train"
    best = (scores(), 0, snapshot())
    history = [{"epoch": 0, **best[0]}]
    ytr = task.labels["train"]
    for epoch in range(1, adam_cfg.max_epochs + 1):
        for idx in _minibatches(len(ytr), adam_cfg.batch_size, rng):
            head.params.zero_grad()
            with Tape() as tape:
                loss = cross_entropy(classify(Tensor(feats["train"][idx]), head), ytr[idx])
            backward(loss, tape)
            opt.step()
        acc = scores()
        history.append({"epoch": epoch, **acc})
        if acc[sel] > best[0][sel]:
            best = (acc, epoch, snapshot())
    for k, t in named:
        t.data = best[2][k]
    return EvalReport(name, "linear", init, best[0], adam_cfg.max_epochs, best[1], history=history)


def finetune(encoder, task, adam_cfg=AdamConfig(), seed=0, name="task", init="pretrained", head=None):
    """Train encoder and head jointly; returns an :class:`EvalReport`.

    The encoder is modified in place and ends at the selected epoch's weights.
    """
    if head is None:
        head = ClassifierHead(encoder.out_dim, task.num_classes, dtype=encoder.dtype, zero=True)
    _check_head(head, task.labels["train"], task.num_classes)
    named = [("encoder/" + k, t) for k, t in encoder.params.items()]
    named += [("head/" + k, t) for k, t in head.params.items()]
    opt = Adam(named, adam_cfg)
    rng = np.random.default_rng([seed, 5])
    bs = adam_cfg.batch_size

    def scores():
        return {s: evaluate(encoder, head, x, task.labels[s], bs) for s, x in task.inputs.items()}

    def snapshot():
        arrays = {k: t.data.copy() for k, t in named}
        arrays.update({k: v.copy() for k, v in encoder.params.arrays("encoder/").items()
                       if k not in arrays})
        return arrays

    def restore(arrays):
        encoder.params.load_arrays(arrays, "encoder/")
        for k, t in head.params.items():
            t.data = arrays["head/" + k]

    sel = "val" if "val" in task.inputs else "train"
    best = (scores(), 0, snapshot())
    history = [{"epoch": 0, **best[0]}]
    xtr, ytr = task.inputs["train"], task.labels["train"]
    step = 0
    for epoch in range(1, adam_cfg.max_epochs + 1):
        for idx in _minibatches(len(ytr), bs, rng):
            if len(idx) < 2:
                continue  # batch norm needs two samples in train mode
            drop_rng = np.random.default_rng([seed, 6, step])
            for _, t in named:
                t.grad = None
            with Tape() as tape:
                h = encoder(Tensor(xtr[idx]), True, drop_rng)
                loss = cross_entropy(classify(h, head), ytr[idx])
            backward(loss, tape)
            opt.step()
            step += 1
        acc = scores()
        history.append({"epoch": epoch, **acc})
        if acc[sel] > best[0][sel]:
            best = (acc, epoch, snapshot())
    restore(best[2])
    return EvalReport(name, "finetune", init, best[0], adam_cfg.max_epochs, best[1], history=history)
