"""Single-file checkpoint container for named float64 matrices.

Layout (all integers little-endian u32):

    magic   4 bytes  b"BLLM"
    version u32
    count   u32
    then per entry, in ascending name order:
        name_len u32, name bytes (utf-8),
        rows u32, cols u32,
        rows*cols float64 little-endian

Writing in sorted order makes files byte-identical for equal contents.
Round-trips are bit-exact. Side metadata (vocab, config JSON) rides along
as byte-valued 1xN matrices under reserved ``__meta__/`` names.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .tensor import Matrix

MAGIC = b"BLLM"
VERSION = 1

_META_PREFIX = "__meta__/"


def save_checkpoint(path, matrices, meta=None):
    """Write name -> Matrix (or ndarray) plus optional meta dict of
    JSON-serializable values."""
    entries = {}
    for name, m in matrices.items():
        a = m.a if isinstance(m, Matrix) else np.asarray(m, dtype=np.float64)
        if a.ndim != 2:
            raise DataError(f"checkpoint entry '{name}' is not 2-D")
        entries[name] = a
    if meta:
        for key, value in meta.items():
            raw = json.dumps(value, sort_keys=True).encode("utf-8")
            arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
            entries[_META_PREFIX + key] = arr.reshape(1, -1)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(entries)))
        for name in sorted(entries):
            a = entries[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<II", a.shape[0], a.shape[1]))
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (matrices, meta) with matrices as
    name -> Matrix and meta a dict of decoded JSON values."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    pos = 12
    matrices = {}
    meta = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        rows, cols = struct.unpack_from("<II", blob, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(blob):
            raise DataError(f"{path}: truncated payload for '{name}'")
        a = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(rows, cols)
        pos += nbytes
        if name.startswith(_META_PREFIX):
            raw = a.reshape(-1).astype(np.uint8).tobytes()
            meta[name[len(_META_PREFIX):]] = json.loads(raw.decode("utf-8"))
        else:
            matrices[name] = Matrix(a.copy())
    if pos != len(blob):
        raise DataError(f"{path}: {len(blob) - pos} trailing bytes")
    return matrices, meta
