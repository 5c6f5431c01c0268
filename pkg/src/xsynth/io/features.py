"""XFEA feature files: header (magic, version, count, dim) then count*dim float32, little-endian."""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"XFEA"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FeatureFileError(ValueError):
    pass


def write_features(path, feats) -> None:
    f = np.asarray(feats, dtype="<f4")
    if f.ndim != 2:
        raise ValueError(f"features must be (count, dim), got shape {f.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, f.shape[0], f.shape[1]))
        fh.write(f.tobytes())


def read_features(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise FeatureFileError(f"cannot read feature file {path}: {e.strerror}") from e
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    if dim == 0:
        raise FeatureFileError(f"{path}: zero feature dimension")
    need = _HEADER.size + 4 * count * dim
    if len(raw) < need:
        raise FeatureFileError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", count=count * dim, offset=_HEADER.size).reshape(count, dim).copy()
