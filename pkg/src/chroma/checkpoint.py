"""Binary checkpoint files (``.ckpt``).

Layout, all integers little-endian::

    magic        8 bytes  b"CHROMACK"
    version      uint32
    meta_len     uint64
    meta         meta_len bytes of UTF-8 JSON (sorted keys)
    n_tensors    uint32
    n_tensors x:
        name_len uint32, name bytes (UTF-8)
        rank     uint32
        dims     rank x int64
        data     prod(dims) x float32
    crc32        uint32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np

MAGIC = b"CHROMACK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    metadata: Dict[str, Any]
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = FORMAT_VERSION


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", ckpt.version, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(np.asarray(arr.shape, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 + 4:
        raise TruncatedCheckpointError("file too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    version, meta_len = struct.unpack_from("<IQ", blob, pos)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch (file corrupted or truncated)")

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise TruncatedCheckpointError("checkpoint ends mid-record")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    pos += 12
    metadata = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = tuple(int(d) for d in np.frombuffer(take(8 * rank), dtype="<i8"))
        n = int(np.prod(dims)) if dims else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return Checkpoint(metadata, tensors, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())
