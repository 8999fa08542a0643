"""Binary parameter checkpoints.

Layout (all integers little-endian)::

    b"EXPN" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | float64 data

Values are written verbatim as little-endian float64, so a save/load cycle is
bit-exact.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"EXPN"
VERSION = 1


def save_tensors(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'EXPN'", 0)
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (count,) = reader.unpack("<I", "tensor count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I", "name length")
        start = reader.pos
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", start) from None
        (rank,) = reader.unpack("<I", "rank")
        dims = reader.unpack(f"<{rank}Q", "dims") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        raw = reader.take(8 * n, f"data of {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    if reader.pos != len(reader.buf):
        raise FormatError("trailing bytes after last tensor", reader.pos)
    return out
