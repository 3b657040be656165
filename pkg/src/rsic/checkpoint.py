"""Versioned binary checkpoints shared by all trained models.

Layout (big-endian): magic "RSCK", version u8, kind string (u8 length +
UTF-8), config JSON (u32 length + UTF-8), tensor count u32, then per tensor:
name (u16 length + UTF-8), ndim u8, each dim u32, raw float32 data.
Tensors are stored sorted by name, so identical parameters always produce
byte-identical files. The model hash is the first 8 bytes of the SHA-256 of
the whole file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RSCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    hash8: bytes  # first 8 bytes of sha256 over the file


def serialize_checkpoint(kind: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack(">B", VERSION)
    kind_b = kind.encode("utf-8")
    out += struct.pack(">B", len(kind_b))
    out += kind_b
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack(">I", len(cfg))
    out += cfg
    out += struct.pack(">I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        name_b = name.encode("utf-8")
        out += struct.pack(">H", len(name_b))
        out += name_b
        out += struct.pack(">B", arr.ndim)
        for d in arr.shape:
            out += struct.pack(">I", d)
        out += arr.astype(">f4").tobytes()
    return bytes(out)


def save_checkpoint(path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    data = serialize_checkpoint(kind, config, tensors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).digest()[:8]


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, field):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{field}: checkpoint truncated at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("magic: not a checkpoint file")
    version = take(1, "version")[0]
    if version != VERSION:
        raise CheckpointError(f"version: unsupported {version}")
    kind = take(take(1, "kind length")[0], "kind").decode("utf-8")
    cfg_len, = struct.unpack(">I", take(4, "config length"))
    config = json.loads(take(cfg_len, "config").decode("utf-8"))
    count, = struct.unpack(">I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        name_len, = struct.unpack(">H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        ndim = take(1, "tensor ndim")[0]
        shape = tuple(struct.unpack(">I", take(4, "tensor dim"))[0] for _ in range(ndim))
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(4 * n, f"tensor {name} data")
        tensors[name] = np.frombuffer(raw, dtype=">f4").astype(np.float32).reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes in checkpoint")
    return Checkpoint(kind, config, tensors, hashlib.sha256(data).digest()[:8])


def combined_hash(*hashes: bytes) -> bytes:
    """8-byte digest binding several model hashes together."""
    return hashlib.sha256(b"".join(hashes)).digest()[:8]
