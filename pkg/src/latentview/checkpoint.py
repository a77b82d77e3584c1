"""Binary checkpoint container shared by the trainer and the server.

Layout (little-endian):
    magic  "UPLV"
    u32    version (= 1)
    u64    config blob length, then UTF-8 JSON config text
    u32    tensor count
    per tensor: u16 name length, name bytes (UTF-8),
                u8 rank, u32 dims..., raw float32 data

Round-tripping is bit-exact; tensors are stored and returned as float32.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UPLV"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, config: dict, tensors: dict) -> None:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(blob))
    out += blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if a.ndim > 0xFF:
            raise CheckpointError(f"tensor rank {a.ndim} too large: {name}")
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    """Returns (config dict, {name: float32 array})."""
    data = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {off}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (blob_len,) = struct.unpack("<Q", take(8))
    config = json.loads(take(blob_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
        tensors[name] = arr
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return config, tensors


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
