"""Flat binary container for named tensors.

Layout (all integers little-endian)::

    magic        4 bytes   b"DSKP"
    version      u32       currently 1
    meta_len     u32       length of the UTF-8 JSON metadata blob
    meta         bytes     JSON object (model config etc.), may be "{}"
    count        u32       number of tensors
    per tensor:
      name_len   u32
      name       bytes     UTF-8
      dtype      u8        0=float64 1=float32 2=int64
      rank       u32
      dims       u64 * rank
      payload    row-major little-endian values
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DSKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BI", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        return _loads(data)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def _loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint")
    pos = 4
    version, meta_len = struct.unpack_from("<II", view, pos)
    pos += 8
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(bytes(view[pos:pos + meta_len]).decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, pos)
        pos += 4
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        tag, rank = struct.unpack_from("<BI", view, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(view, dtype=dt, count=n, offset=pos).reshape(dims)
        pos += n * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return out, meta


def save(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(tensors, meta))


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes())
