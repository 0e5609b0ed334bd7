"""Versioned binary checkpoint files.

Layout (all integers little-endian):

    magic   4 bytes   b"SSCK"
    version u32       format version (currently 1)
    meta    u32 + bytes   JSON metadata document, UTF-8
    count   u32       number of parameter blocks
    blocks  repeated: u16 name length, name UTF-8, u8 ndim,
                      u32 per dim, float32 payload little-endian
    crc     u32       zlib.crc32 of every preceding byte

Files round-trip bit-exactly: metadata is serialized with sorted keys and
payloads are written in insertion order.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SSCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named float32 arrays plus a JSON metadata dict."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float32)  # ascontiguousarray would turn 0-d into 1-d
        name_b = name.encode()
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.astype("<f4").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, meta dict). Verifies checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off : off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        arrays[name] = np.array(arr)  # own the memory, native order
    return arrays, meta


def checkpoint_digest(path) -> str:
    """Hex digest of the parameter payload, for freeze checks."""
    raw = Path(path).read_bytes()
    return f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}"
