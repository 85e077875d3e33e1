"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MFFU"  u32 version  u64 config_len  config_text (UTF-8 JSON)
    u32 tensor_count
    per tensor: u16 name_len  name  u8 rank  u32 dims[rank]  float32 values
    8-byte BLAKE2b digest of every preceding byte
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, Model, ModelConfig, build_model

MAGIC = b"MFFU"
VERSION = 1
CHECKSUM_SIZE = 8


class CheckpointError(Exception):
    pass


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_SIZE).digest()


def named_arrays(m: Model):
    """Parameters followed by buffers, in construction order."""
    for name, t in m.params.items():
        yield name, t.data
    yield from m.buffers.items()


def to_bytes(m: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = m.config.to_json().encode("utf-8")
    parts += [struct.pack("<Q", len(cfg)), cfg]
    arrays = list(named_arrays(m))
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + _checksum(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Model:
    if len(buf) < len(MAGIC) + CHECKSUM_SIZE or _checksum(buf[:-CHECKSUM_SIZE]) != buf[-CHECKSUM_SIZE:]:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupt")
    r = _Reader(buf[:-CHECKSUM_SIZE])
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<Q")
    try:
        config = ModelConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except (ConfigError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"invalid embedded config: {e}") from None
    model = build_model(config)
    expected = dict(named_arrays(model))
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        values = np.frombuffer(r.take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4").reshape(dims)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} for embedded config")
        if expected[name].shape != tuple(dims):
            raise CheckpointError(f"tensor {name!r} has shape {tuple(dims)}, config implies {expected[name].shape}")
        expected[name][...] = values
        seen.add(name)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after tensor table")
    missing = set(expected) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return model


def save_checkpoint(m: Model, path) -> None:
    Path(path).write_bytes(to_bytes(m))


def load_checkpoint(path) -> Model:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    return from_bytes(buf)


def snapshot(m: Model) -> dict:
    """In-memory copy of every parameter and buffer."""
    return {name: arr.copy() for name, arr in named_arrays(m)}


def restore(m: Model, snap: dict) -> None:
    for name, t in m.params.items():
        t.data[...] = snap[name]
    for name, arr in m.buffers.items():
        arr[...] = snap[name]

