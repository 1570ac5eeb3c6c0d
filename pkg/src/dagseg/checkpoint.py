"""Versioned binary container for model configs, named float64 tensors and run metadata.

Layout (little-endian)::

    magic    8 bytes  b"DAGSEGCK"
    version  u32
    config   u32 length + UTF-8 JSON
    meta     u32 length + UTF-8 JSON
    count    u32
    count x tensor:
        name     u16 length + UTF-8
        ndim     u8
        dims     ndim x u64
        payload  prod(dims) x f64
        crc32    u32 over the payload bytes
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DAGSEGCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _blob(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(ckpt.config), _blob(ckpt.meta)]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode()
        payload = arr.tobytes()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode())


def loads(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config, meta = r.json(), r.json()
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        payload = r.take(8 * int(np.prod(shape, dtype=np.int64)))
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch for tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return Checkpoint(config, tensors, meta)


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
