"""Manifest-driven dataset ingestion and a synthetic tone-cluster dataset."""
from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import dsp
from .errors import ConfigError, DataError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Record:
    path: str
    label: str | None
    split: str

    @property
    def id(self):
        return self.path


@dataclass
class Manifest:
    records: list
    label_map: dict
    root: Path = field(default_factory=Path)

    def split(self, name):
        """Records of split ``name``; ``None`` selects every record."""
        if name is None:
            return list(self.records)
        return [r for r in self.records if r.split == name]

    def resolve(self, record):
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    @property
    def num_classes(self):
        return len(self.label_map)

    def labels_of(self, records):
        missing = [r.id for r in records if r.label is None]
        if missing:
            raise DataError(f"record {missing[0]!r} has no label")
        unknown = [r.label for r in records if r.label not in self.label_map]
        if unknown:
            raise DataError(f"label {unknown[0]!r} is not in the label map")
        return np.array([self.label_map[r.label] for r in records], dtype=np.int64)

    def write(self, path):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "label", "split"])
            for r in self.records:
                w.writerow([r.path, r.label or "", r.split])


def load_manifest(path):
    """Parse a ``path,label,split`` CSV (header required, UTF-8)."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open manifest {path}: {exc}") from exc
    records = []
    seen = set()
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty manifest")
        header = [h.strip() for h in header]
        missing = [c for c in ("path", "label", "split") if c not in header]
        if missing:
            raise DataError(f"{path}:1: missing column(s) {', '.join(missing)}")
        ip, il, isp = header.index("path"), header.index("label"), header.index("split")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            p, lab, sp = row[ip].strip(), row[il].strip(), row[isp].strip()
            if sp not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {sp!r} (expected one of {SPLITS})")
            if not p:
                raise DataError(f"{path}:{lineno}: empty path")
            if (p, sp) in seen:
                raise DataError(f"{path}:{lineno}: duplicate path {p!r} in split {sp!r}")
            seen.add((p, sp))
            records.append(Record(p, lab or None, sp))
    labels = sorted({r.label for r in records if r.label is not None})
    return Manifest(records, {lab: i for i, lab in enumerate(labels)}, path.parent)


# -- synthetic data ---------------------------------------------------------

def class_frequency(k):
    return 200.0 * 2.0 ** (k / 2.0)


def synth_clip(k, rng, duration_s=1.0, sample_rate=16000, snr_db=20.0, n_partials=4, fmax=7800.0):
    """One tone-cluster clip for class ``k``.

    Partials at integer multiples of the jittered base frequency (amplitude
    1/h, random phases, only those below ``fmax``), plus white noise at
    ``snr_db``.
    """
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = class_frequency(k) * (1.0 + rng.uniform(-0.03, 0.03))
    sig = np.zeros(n)
    for h in range(1, n_partials + 1):
        if h * f0 >= fmax:
            break
        sig += np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi)) / h
    p_sig = np.mean(sig ** 2)
    noise = rng.standard_normal(n) * np.sqrt(p_sig / 10 ** (snr_db / 10))
    x = sig + noise
    return 0.5 * x / np.max(np.abs(x))


def synth_dataset(out_dir, classes=4, per_class=50, duration_s=1.0, seed=0, splits=None,
                  sample_rate=16000):
    """Write ``classes * per_class`` WAVs plus ``manifest.csv`` into ``out_dir``.

    ``splits`` maps split name to clips per class (must sum to ``per_class``);
    by default every clip goes to ``train``.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    splits = {"train": per_class} if splits is None else dict(splits)
    if sum(splits.values()) != per_class or any(s not in SPLITS for s in splits):
        raise ConfigError(f"bad split allocation {splits} for per_class={per_class}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out} is not writable: {exc}") from exc
    rng = np.random.default_rng(seed)
    records = []
    for k in range(classes):
        i = 0
        for split, count in splits.items():
            for _ in range(count):
                x = synth_clip(k, rng, duration_s, sample_rate)
                name = f"class{k:02d}_{i:05d}.wav"
                wavfile.write(out / name, sample_rate, np.round(x * 32767).astype(np.int16))
                records.append(Record(name, f"class{k:02d}", split))
                i += 1
    labels = sorted({r.label for r in records})
    manifest = Manifest(records, {lab: i for i, lab in enumerate(labels)}, out)
    manifest.write(out / "manifest.csv")
    return manifest


# -- features and batches ---------------------------------------------------

@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray | None
    ids: list


class FeatureStore:
    """Full-length log-mel features per record, memoized in memory and
    optionally persisted in the versioned on-disk cache format."""

    def __init__(self, manifest, cfg=dsp.DspConfig(), cache_dir=None, workers=0):
        self.manifest = manifest
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.workers = workers
        self._mem = {}

    def _cache_path(self, record):
        key = hashlib.sha1(str(self.manifest.resolve(record)).encode()).hexdigest()[:16]
        return self.cache_dir / f"{key}.dlmf"

    def _compute(self, record):
        if self.cache_dir is not None:
            cp = self._cache_path(record)
            if cp.exists():
                return dsp.load_feature_cache(cp)
        try:
            clip = dsp.load_audio(self.manifest.resolve(record), self.cfg.sample_rate)
            values = dsp.logmel(clip, self.cfg).values
        except DataError as exc:
            raise DataError(f"record {record.id!r}: {exc}") from exc
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            dsp.save_feature_cache(self._cache_path(record), values)
        return values

    def get_many(self, records):
        todo = [r for r in records if r.id not in self._mem]
        if todo:
            if self.workers > 1:
                with ThreadPoolExecutor(self.workers) as ex:
                    results = list(ex.map(self._compute, todo))  # map keeps input order
            else:
                results = [self._compute(r) for r in todo]
            for r, v in zip(todo, results):
                self._mem[r.id] = v
        return [self._mem[r.id] for r in records]

    def get(self, record):
        return self.get_many([record])[0]


def downstream_frames(manifest, split="train", cfg=dsp.DspConfig(), multiple=16):
    """Frame count of the split's average clip duration, rounded to a multiple of 16."""
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty" if split else "manifest is empty")
    durations = []
    for r in records:
        path = manifest.resolve(r)
        try:
            rate, data = wavfile.read(path, mmap=True)
        except (OSError, ValueError) as exc:
            raise DataError(f"record {r.id!r}: cannot read {path}: {exc}") from exc
        durations.append(data.shape[0] / rate)
    n = int(round(np.mean(durations) * cfg.sample_rate))
    frames = max(1, dsp.frame_count(n, cfg))
    return max(multiple, int(round(frames / multiple)) * multiple)


def batch_iter(manifest, split, batch_size, frames, mode, rng, store=None, shuffle=None):
    """Yield :class:`Batch` objects for one epoch.

    pretrain: shuffled, random crops, unlabeled, last partial batch dropped.
    supervised: crops start at frame 0 (padded if short), labels attached,
    last partial batch kept; shuffled only when ``shuffle`` is true.
    """
    if mode not in ("pretrain", "supervised"):
        raise ConfigError(f"unknown batch mode {mode!r}")
    records = manifest.split(split)
    if not records:
        raise DataError(f"split {split!r} is empty" if split else "manifest is empty")
    store = FeatureStore(manifest) if store is None else store
    if shuffle is None:
        shuffle = mode == "pretrain"
    order = rng.permutation(len(records)) if shuffle else np.arange(len(records))
    floor = store.cfg.floor_value
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if mode == "pretrain" and len(idx) < batch_size:
            return
        recs = [records[i] for i in idx]
        feats = store.get_many(recs)
        out = np.empty((len(recs), 1, store.cfg.n_mels, frames), dtype=np.float32)
        for b, v in enumerate(feats):
            spec = dsp.LogMelSpectrogram(v)
            if mode == "pretrain":
                out[b, 0] = dsp.crop_frames(spec, frames, rng, floor).values
            else:
                out[b, 0] = _fixed_crop(v, frames, floor)
        labels = None
        if mode == "supervised":
            labels = manifest.labels_of(recs)
        yield Batch(out, labels, [r.id for r in recs])


def _fixed_crop(values, frames, floor):
    T = values.shape[1]
    if T >= frames:
        return values[:, :frames]
    out = np.full((values.shape[0], frames), floor, dtype=values.dtype)
    out[:, :T] = values
    return out
