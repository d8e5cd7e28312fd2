"""Binary checkpoint and array-file formats.

Checkpoint layout (all integers little-endian)::

    b"DLRS"  u32 version  u64 json_len  <json utf-8>  u32 n_arrays
    n_arrays x { u16 name_len  <name utf-8>  u8 dtype  u8 rank  rank x u64 dim  <payload> }

The JSON section holds the config snapshot and run metadata (epoch, step,
rng seed, normalization stats, metrics tail). Writes go to a temp file that
is renamed into place.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DataError

MAGIC = b"DLRS"
VERSION = 1

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1", 4: "<i4"}


def _dtype_code(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|",) else arr.dtype
    for code, name in _DTYPES.items():
        if np.dtype(name) == dt:
            return code
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict

    @property
    def config(self):
        return self.meta.get("config", {})


def _atomic_write(path, payload_writer):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        payload_writer(fh)
    tmp.replace(path)


def save_checkpoint(path, meta, arrays):
    """Write ``meta`` (JSON-serializable) and named ``arrays`` to ``path``."""
    text = json.dumps(meta, sort_keys=True).encode("utf-8")

    def write(fh):
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            code = _dtype_code(arr)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())

    _atomic_write(path, write)


class _Reader:
    def __init__(self, fh, path):
        self.buf = fh
        self.path = path

    def read(self, n):
        b = self.buf.read(n)
        if len(b) != n:
            raise CheckpointError(f"checkpoint {self.path} is truncated")
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Read a checkpoint; raises CheckpointError on any format problem."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        return _read_checkpoint(_Reader(fh, path), path)


def _read_checkpoint(r, path):
    if r.read(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, jlen = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.read(jlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path}: corrupt metadata") from exc
    (n,) = r.unpack("<I")
    arrays = {}
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.read(nl).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"checkpoint {path}: unknown dtype code {code} for {name}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        dt = np.dtype(_DTYPES[code])
        count = int(np.prod(dims)) if dims else 1
        data = r.read(count * dt.itemsize)
        arrays[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.buf.read(1):
        raise CheckpointError(f"checkpoint {path} has trailing bytes")
    return Checkpoint(meta, arrays)


# -- embedding matrix files -------------------------------------------------
# b"DLEM", u32 version, u32 rows, u32 cols, rows*cols float32 LE.

EMB_MAGIC = b"DLEM"
EMB_VERSION = 1


def save_embeddings(path, matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = matrix.shape

    def write(fh):
        fh.write(struct.pack("<4sIII", EMB_MAGIC, EMB_VERSION, rows, cols))
        fh.write(matrix.tobytes())

    _atomic_write(path, write)


def load_embeddings(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataError(f"embedding file {path} is truncated")
    magic, version, rows, cols = struct.unpack_from("<4sIII", raw)
    if magic != EMB_MAGIC:
        raise DataError(f"{path} is not an embedding file (bad magic)")
    if version != EMB_VERSION:
        raise DataError(f"embedding file {path} has version {version}, expected {EMB_VERSION}")
    payload = raw[16:]
    if len(payload) != 4 * rows * cols:
        raise DataError(f"embedding file {path} is truncated")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
