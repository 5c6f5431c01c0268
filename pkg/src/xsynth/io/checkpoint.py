"""XMOD checkpoint container.

Layout (little-endian)::

    b"XMOD" | u32 version
    u32 n | n bytes UTF-8 JSON of the ArchConfig (sorted keys)
    u32 n | n bytes schedule descriptor
    u32 n | n bytes UTF-8 JSON metadata (sorted keys)
    u32 tensor count, then per tensor:
        u16 n | name | u8 ndim | u32 dims... | float32 data (C order)
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from xsynth.nets.archs import ArchConfig
from xsynth.nets.model import DenoiserModel, make_forward, param_shapes
from xsynth.schedule import format_schedule, parse_schedule

MAGIC = b"XMOD"
VERSION = 1
DIGEST = 32


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ArchConfig
    params: dict
    schedule: str = "cosine"
    metadata: dict = field(default_factory=dict)

    def model(self) -> DenoiserModel:
        return DenoiserModel(self.config, self.params, make_forward(self.config))


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ck: Checkpoint) -> bytes:
    shapes = param_shapes(ck.config)
    if set(shapes) != set(ck.params):
        raise CheckpointError("parameter names do not match the architecture")
    out = [MAGIC, struct.pack("<I", VERSION), _blob(_json(ck.config.to_dict())),
           _blob(format_schedule(parse_schedule(ck.schedule)).encode()), _blob(_json(ck.metadata)),
           struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = np.asarray(ck.params[name])
        if arr.shape != shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, architecture expects {shape}")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self):
        (n,) = self.unpack("<I")
        return self.take(n)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < 8 + DIGEST or raw[:4] != MAGIC:
        raise CheckpointError("not an XMOD checkpoint (bad magic)")
    body, digest = raw[:-DIGEST], raw[-DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = ArchConfig.from_dict(json.loads(r.blob()))
    schedule = r.blob().decode()
    metadata = json.loads(r.blob())
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (nd,) = r.unpack("<B")
        shape = r.unpack(f"<{nd}I")
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    expected = param_shapes(cfg)
    if {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("tensor table does not match the stored architecture")
    return Checkpoint(cfg, params, schedule, metadata)


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
