"""Self-supervised pretraining loop.

Per step: build two augmented views of the batch, embed both through the
encoder and projector, take the cross-correlation matrix of the two
embedding batches, and minimize the Barlow Twins loss with LARS.

Randomness is derived from ``(seed, epoch)`` for data order and crops and
from ``(seed, step)`` for augmentation and dropout, so a resumed run only
needs the step counter (plus the mixup queues) to continue exactly.
"""
from __future__ import annotations

import contextlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augment, checkpoint, data, dsp
from .augment import AugmentConfig, MixupQueue, NormStats
from .errors import CheckpointError, ConfigError, NumericalError
from .model import Encoder, ModelConfig, Projector
from .objective import DEFAULT_LAMBDA, barlow_loss_from_embeddings, correlation_extrema
from .optim import LarsConfig, Lars, ScheduleConfig, lr_at
from .tensor import Tape, backward, single_threaded

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.dlrs"
METRICS_NAME = "metrics.jsonl"


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lam: float = DEFAULT_LAMBDA
    deterministic: bool = True
    workers: int = 0
    dsp: dsp.DspConfig = field(default_factory=dsp.DspConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lars: LarsConfig = field(default_factory=LarsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")

    def effective_schedule(self):
        """The configured schedule stretched to this run's length (warmup keeps its share)."""
        s = self.schedule
        return ScheduleConfig(
            warmup_epochs=s.warmup_epochs * self.epochs / s.total_epochs,
            total_epochs=self.epochs,
            final_lr_fraction=s.final_lr_fraction,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        subs = {"dsp": dsp.DspConfig, "augment": AugmentConfig, "model": ModelConfig,
                "lars": LarsConfig, "schedule": ScheduleConfig}
        for key, typ in subs.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if key == "augment":
                    for k in ("freq_range", "time_range"):
                        if k in sub:
                            sub[k] = tuple(sub[k])
                d[key] = typ(**sub)
        return cls(**d)


def step_rng(seed, step):
    return np.random.default_rng([seed, 1, step])


def epoch_rng(seed, epoch):
    return np.random.default_rng([seed, 0, epoch])


class Pretrainer:
    """Owns model, optimizer, mixup queues and step counter for one run."""

    def __init__(self, cfg, stats, steps_per_epoch):
        self.cfg = cfg
        self.stats = stats
        self.steps_per_epoch = steps_per_epoch
        self.schedule = cfg.effective_schedule()
        init = np.random.default_rng([cfg.seed, 2])
        enc_rng, proj_rng = init.spawn(2)
        self.encoder = Encoder(cfg.model, enc_rng)
        self.projector = Projector(cfg.model, proj_rng)
        named = [("encoder/" + k, t) for k, t in self.encoder.params.items()]
        named += [("projector/" + k, t) for k, t in self.projector.params.items()]
        self.named = named
        self.lars = Lars(named, cfg.lars)
        self.lr_w, self.lr_b = cfg.lars.scaled(cfg.batch_size)
        qsize = cfg.augment.mixup_queue_size
        self.queue_a = MixupQueue(qsize)
        self.queue_b = MixupQueue(qsize)
        self.step = 0
        self.epoch = 0
        self.metrics = []

    def lrs(self, step):
        return (lr_at(step, self.steps_per_epoch, self.schedule, self.lr_w),
                lr_at(step, self.steps_per_epoch, self.schedule, self.lr_b))

    def pretrain_step(self, batch):
        """One optimization step on ``batch`` ([B, 1, F, T] log-mel crops)."""
        cfg = self.cfg
        rng = step_rng(cfg.seed, self.step)
        aug_rng, drop_rng = rng.spawn(2)
        xa, xb = augment.make_views(batch, self.stats, self.queue_a, self.queue_b, aug_rng, cfg.augment)
        lr_w, lr_b = self.lrs(self.step)
        for _, t in self.named:
            t.grad = None
        diag = {}
        try:
            with Tape() as tape:
                za = self.projector(self.encoder(xa, True, drop_rng), True, drop_rng)
                diag["za_norm"] = float(np.linalg.norm(za.data))
                zb = self.projector(self.encoder(xb, True, drop_rng), True, drop_rng)
                diag["zb_norm"] = float(np.linalg.norm(zb.data))
                lb = barlow_loss_from_embeddings(za, zb, cfg.lam)
                diag["c_diag_mean"] = float(lb.c_diag.mean())
            if not np.isfinite(lb.total):
                raise NumericalError("loss is not finite")
            backward(lb.loss, tape)
            self.lars.step(lr_w, lr_b)
        except NumericalError as exc:
            if "zb_norm" in diag:
                diag["c_min"], diag["c_max"] = correlation_extrema(za.data, zb.data)
            raise NumericalError(f"step {self.step}: {exc}; diagnostics: {json.dumps(diag)}") from exc
        lb.loss = None
        self.last_diagnostics = diag
        record = {
            "step": self.step, "epoch": self.epoch, "lr": lr_w,
            "invariance": lb.invariance, "redundancy": lb.redundancy, "total": lb.total,
            "c_diag_mean": diag["c_diag_mean"],
        }
        self.metrics.append(record)
        self.step += 1
        return lb

    # -- checkpoint state ----------------------------------------------------
    def state(self):
        arrays = {}
        arrays.update(self.encoder.params.arrays("encoder/"))
        arrays.update(self.projector.params.arrays("projector/"))
        arrays.update(self.lars.state_arrays())
        for name, q in (("queue_a", self.queue_a), ("queue_b", self.queue_b)):
            a = q.as_array()
            if a is not None:
                arrays[f"augment/{name}"] = a
        meta = {
            "config": self.cfg.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "rng": {"seed": self.cfg.seed, "step": self.step, "epoch": self.epoch},
            "norm_stats": {"mu": self.stats.mu, "nu": self.stats.nu},
            "steps_per_epoch": self.steps_per_epoch,
            "metrics_tail": self.metrics[-100:],
            "kind": "pretrain",
        }
        return meta, arrays

    def load_state(self, ckpt):
        arrays = ckpt.arrays
        try:
            self.encoder.params.load_arrays(arrays, "encoder/")
            self.projector.params.load_arrays(arrays, "projector/")
            self.lars.load_state_arrays(arrays)
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing array {exc}") from exc
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
        self.queue_a.load_array(arrays.get("augment/queue_a"))
        self.queue_b.load_array(arrays.get("augment/queue_b"))
        self.step = int(ckpt.meta["step"])
        self.epoch = int(ckpt.meta["epoch"])
        self.metrics = list(ckpt.meta.get("metrics_tail", []))


def save_pretrainer(trainer, path):
    meta, arrays = trainer.state()
    checkpoint.save_checkpoint(path, meta, arrays)


def compute_norm_stats(store, records):
    return NormStats.from_arrays(store.get_many(records))


def run_pretraining(manifest, cfg, out_dir, resume=None, stop_after_epoch=None, store=None):
    """Run (or continue) pretraining; returns the final :class:`Pretrainer`.

    Writes ``metrics.jsonl`` (one JSON object per step) and overwrites
    ``checkpoint.dlrs`` after every epoch. ``resume`` is a checkpoint path.
    ``stop_after_epoch`` ends the run early (used to split a run in two).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = manifest.split("train")
    if len(records) < cfg.batch_size:
        raise ConfigError(f"{len(records)} training records < batch_size {cfg.batch_size}")
    steps_per_epoch = len(records) // cfg.batch_size
    store = data.FeatureStore(manifest, cfg.dsp, workers=cfg.workers) if store is None else store
    ctx = single_threaded() if cfg.deterministic else contextlib.nullcontext()
    with ctx:
        if resume is not None:
            ckpt = checkpoint.load_checkpoint(resume)
            ns = ckpt.meta["norm_stats"]
            stats = NormStats(ns["mu"], ns["nu"])
            trainer = Pretrainer(cfg, stats, steps_per_epoch)
            trainer.load_state(ckpt)
            _truncate_metrics(out / METRICS_NAME, trainer.step)
        else:
            stats = compute_norm_stats(store, records)
            trainer = Pretrainer(cfg, stats, steps_per_epoch)
            (out / METRICS_NAME).write_text("")
        ckpt_path = out / CHECKPOINT_NAME
        with open(out / METRICS_NAME, "a", encoding="utf-8") as mlog:
            try:
                while trainer.epoch < cfg.epochs:
                    if stop_after_epoch is not None and trainer.epoch >= stop_after_epoch:
                        break
                    rng = epoch_rng(cfg.seed, trainer.epoch)
                    for batch in data.batch_iter(manifest, "train", cfg.batch_size,
                                                 cfg.dsp.pretrain_frames, "pretrain", rng, store):
                        lb = trainer.pretrain_step(batch.features)
                        rec = trainer.metrics[-1]
                        mlog.write(json.dumps(rec) + "\n")
                        mlog.flush()
                        log.info("epoch %d step %d loss %.4f (inv %.4f, red %.2f)",
                                 trainer.epoch, rec["step"], lb.total, lb.invariance, lb.redundancy)
                    trainer.epoch += 1
                    save_pretrainer(trainer, ckpt_path)
            except Exception:
                save_pretrainer(trainer, out / "checkpoint.failed.dlrs")
                raise
    return trainer


def _truncate_metrics(path, n_steps):
    if not path.exists():
        return
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    path.write_text("".join(ln + "\n" for ln in lines[:n_steps]))


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_encoder(path, dtype=np.float32):
    """Rebuild the encoder stored in a pretraining checkpoint."""
    ckpt = checkpoint.load_checkpoint(path)
    cfg = PretrainConfig.from_dict(ckpt.config)
    enc = Encoder(cfg.model, np.random.default_rng(0), dtype)
    try:
        enc.params.load_arrays(ckpt.arrays, "encoder/")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing array {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return enc, cfg, ckpt


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
