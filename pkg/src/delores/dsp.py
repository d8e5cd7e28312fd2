"""Log-mel feature extraction.

64 ms Hann windows every 10 ms, power spectrum, 64 Slaney-scale triangular
mel filters over 60-7800 Hz, natural log with a 1e-10 floor.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class DspConfig:
    sample_rate: int = 16000
    window_ms: float = 64.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0
    log_floor: float = 1e-10
    pretrain_frames: int = 96

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ConfigError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")
        if self.window_ms <= self.hop_ms:
            raise ConfigError("window_ms must exceed hop_ms")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")

    @property
    def win_length(self):
        return int(round(self.sample_rate * self.window_ms / 1000))

    @property
    def hop_length(self):
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def n_fft(self):
        return 1 << (self.win_length - 1).bit_length()

    @property
    def floor_value(self):
        """Log-domain value of silence: log(log_floor)."""
        return float(np.log(self.log_floor))

    def to_dict(self):
        return asdict(self)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")
        if self.samples.size == 0:
            raise DataError("empty audio clip")

    @property
    def duration(self):
        return self.samples.shape[0] / self.sample_rate


@dataclass
class LogMelSpectrogram:
    """values: float32 [n_mels, frames], natural-log mel power."""
    values: np.ndarray
    hop_ms: float = 10.0
    window_ms: float = 64.0
    fmin: float = 60.0
    fmax: float = 7800.0

    @property
    def n_frames(self):
        return self.values.shape[1]


def load_audio(path, target_rate=16000):
    """Read a PCM/float WAV file, downmix to mono and resample to ``target_rate``."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read audio file {path}: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise DataError(f"unsupported WAV sample type {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise DataError(f"audio file {path} is empty")
    if rate != target_rate:
        ratio = Fraction(target_rate, rate)
        x = resample_poly(x, ratio.numerator, ratio.denominator)
    return AudioClip(np.clip(x, -1.0, 1.0), target_rate)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    log = min_log_mel + np.log(np.maximum(f, 1e-12) / 1000.0) / logstep
    return np.where(f >= 1000.0, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_mel = 1000.0 / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, 1000.0 * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(n_mels, fmin, fmax):
    """n_mels + 2 frequencies (Hz) evenly spaced on the mel scale; centers are [1:-1]."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax):
    """[n_mels, n_fft//2 + 1] unit-peak triangular filters on the FFT bin grid."""
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples, cfg=DspConfig()):
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def logmel(clip, cfg=DspConfig(), dtype=np.float32):
    """Log-mel spectrogram of ``clip`` as [n_mels, frames] (computed in float64)."""
    if clip.sample_rate != cfg.sample_rate:
        raise DataError(f"clip at {clip.sample_rate} Hz, expected {cfg.sample_rate} Hz")
    win, hop, n_fft = cfg.win_length, cfg.hop_length, cfg.n_fft
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.shape[0] < win:
        raise DataError(f"clip of {x.shape[0]} samples is shorter than one {win}-sample window")
    n = frame_count(x.shape[0], cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]
    spec = np.fft.rfft(frames * get_window("hann", win), n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg.sample_rate, n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    mel = fb @ power.T
    values = np.log(np.maximum(mel, cfg.log_floor)).astype(dtype)
    return LogMelSpectrogram(values, cfg.hop_ms, cfg.window_ms, cfg.fmin, cfg.fmax)


def crop_frames(spec, length, rng, pad_value=None):
    """Random contiguous window of ``length`` frames, right-padded if too short.

    ``pad_value`` defaults to log(1e-10), the value silence maps to.
    """
    values = spec.values
    T = values.shape[1]
    if T >= length:
        start = int(rng.integers(0, T - length + 1)) if T > length else 0
        out = values[:, start:start + length].copy()
    else:
        fill = np.log(1e-10) if pad_value is None else pad_value
        out = np.full((values.shape[0], length), fill, dtype=values.dtype)
        out[:, :T] = values
    return LogMelSpectrogram(out, spec.hop_ms, spec.window_ms, spec.fmin, spec.fmax)


# -- feature cache ---------------------------------------------------------
# layout: b"DLMF", u32 version, u32 F, u32 T, F*T float32 little-endian (row-major)

CACHE_MAGIC = b"DLMF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


def save_feature_cache(path, values):
    values = np.ascontiguousarray(values, dtype="<f4")
    F, T = values.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, F, T))
        fh.write(values.tobytes())
    tmp.replace(path)


def load_feature_cache(path):
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise DataError(f"feature cache {path} is truncated")
    magic, version, F, T = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC:
        raise DataError(f"{path} is not a feature cache (bad magic)")
    if version != CACHE_VERSION:
        raise DataError(f"feature cache {path} has version {version}, expected {CACHE_VERSION}")
    payload = raw[_CACHE_HEADER.size:]
    if len(payload) != 4 * F * T:
        raise DataError(f"feature cache {path} is truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(F, T).astype(np.float32)
