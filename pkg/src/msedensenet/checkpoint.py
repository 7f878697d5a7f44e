"""Binary checkpoint container.

Layout (all integers u32 little-endian)::

    b"MSED" | version | len + UTF-8 "key=value\\n" block | tensor count |
    per tensor: len + UTF-8 name, rank, dims..., float32 LE payload |
    CRC32 of every preceding byte
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"MSED"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, corrupted, or incompatible checkpoint file."""


def encode(meta: Dict[str, str], tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    lines = []
    for key, value in meta.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"metadata entry {key!r} cannot contain '=' in the key or newlines")
        lines.append(f"{key}={value}\n")
    block = "".join(lines).encode("utf-8")
    parts += [struct.pack("<I", len(block)), block, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise CheckpointError("checkpoint is truncated")
    version = struct.unpack("<I", buf[4:8])[0]
    if version > VERSION:
        raise CheckpointError(f"checkpoint version {version} is newer than supported version {VERSION}")
    if version < 1:
        raise CheckpointError(f"invalid checkpoint version {version}")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch (corrupted or truncated file)")
    r = _Reader(body)
    r.pos = 8
    block = r.take(r.u32()).decode("utf-8")
    meta = {}
    for line in block.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key] = value
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor section")
    return meta, tensors


def write(path: os.PathLike, meta: Dict[str, str], tensors: Dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    os.replace(tmp, path)


def read(path: os.PathLike) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
