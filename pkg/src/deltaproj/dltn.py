"""DLTN tensor fixture format.

Layout (all little-endian)::

    b"DLTN" | u32 version (=1) | u32 rank | rank x u64 dims | f64 payload (row-major)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DLTN"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode(t: np.ndarray) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    if any(d < 1 for d in t.shape):
        raise FormatError(f"cannot encode tensor with empty dimension {t.shape}")
    head = _HEADER.pack(MAGIC, VERSION, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", offset=len(buf))
    magic, version, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    off = _HEADER.size
    need = off + 8 * rank
    if len(buf) < need:
        raise FormatError(f"truncated dims: need {need} bytes, have {len(buf)}", offset=len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    for i, d in enumerate(dims):
        if d < 1:
            raise FormatError(f"dimension {i} is zero", offset=off + 8 * i)
    off = need
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = off + 8 * count
    if len(buf) < end:
        raise FormatError(
            f"truncated payload: expected {8 * count} bytes, found {len(buf) - off}", offset=len(buf)
        )
    if len(buf) > end:
        raise FormatError(f"{len(buf) - end} trailing bytes after payload", offset=end)
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return data.astype(np.float64).reshape(dims)


def save(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode(t))


def load(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    try:
        return decode(buf)
    except FormatError as exc:
        err = FormatError(f"{path}: {exc.args[0]}")
        err.offset = exc.offset
        raise err from None
