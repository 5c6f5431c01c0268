"""Single-file, uncompressed NIfTI-1 (``n+1``) reader and writer.

Only the header fields needed for 2-D/3-D scalar volumes are interpreted.
Written files are float32 with identity intensity scaling, little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from xsynth.volume import IntensityMeta, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: "u1", DT_INT16: "i2", DT_FLOAT32: "f4"}


class NiftiError(ValueError):
    pass


class MagicMismatch(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedFile(NiftiError):
    pass


class CompressedInput(NiftiError):
    pass


@dataclass
class NiftiHeaderSubset:
    dim: tuple  # (ndim, nx, ny, nz)
    datatype: int
    pixdim: tuple  # (dx, dy, dz)
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    endian: str = "<"


def _parse_header(raw: bytes) -> NiftiHeaderSubset:
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise MagicMismatch(f"sizeof_hdr is {sizeof_hdr}, not {HEADER_SIZE}")
        endian = ">"
    magic = raw[344:348]
    if magic != MAGIC:
        raise MagicMismatch(f"expected single-file magic {MAGIC!r}, found {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype, _bitpix = struct.unpack_from(endian + "hh", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", raw, 108)
    ndim = dim[0]
    if ndim not in (2, 3):
        raise NiftiError(f"only 2-D and 3-D volumes are supported, dim[0]={ndim}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not uint8, int16 or float32")
    sizes = tuple(dim[1:4]) if ndim == 3 else (dim[1], dim[2], 1)
    if min(sizes) < 1:
        raise NiftiError(f"invalid dimensions {sizes}")
    return NiftiHeaderSubset((ndim,) + sizes, datatype, tuple(float(p) for p in pixdim[1:4]),
                             float(vox_offset), float(scl_slope), float(scl_inter), magic, endian)


def read_nifti_header(path) -> NiftiHeaderSubset:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    _reject_gzip(raw, path)
    return _parse_header(raw)


def _reject_gzip(raw, path):
    if raw[:2] == b"\x1f\x8b":
        raise CompressedInput(f"{path}: compressed NIfTI is not supported; decompress it first")


def read_nifti(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    _reject_gzip(raw, path)
    hdr = _parse_header(raw)
    shape = hdr.dim[1:4]
    dt = np.dtype(hdr.endian + _DTYPES[hdr.datatype])
    offset = int(hdr.vox_offset)
    nbytes = int(np.prod(shape)) * dt.itemsize
    if offset < HEADER_SIZE or len(raw) < offset + nbytes:
        raise TruncatedFile(f"{path}: expected {nbytes} data bytes at offset {offset}, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape, order="F")
    slope = hdr.scl_slope if hdr.scl_slope != 0 else 1.0
    if hdr.datatype == DT_FLOAT32 and slope == 1.0 and hdr.scl_inter == 0.0:
        arr = data.astype(np.float32)
    else:
        arr = (data.astype(np.float64) * slope + hdr.scl_inter).astype(np.float32)
    spacing = tuple(abs(p) if p else 1.0 for p in hdr.pixdim)
    return Volume(np.ascontiguousarray(arr), spacing, IntensityMeta.raw())


def encode_nifti(data, spacing=(1.0, 1.0, 1.0), datatype=DT_FLOAT32, scl_slope=1.0, scl_inter=0.0) -> bytes:
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected 2-D or 3-D data, got shape {arr.shape}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} is not uint8, int16 or float32")
    dt = np.dtype("<" + _DTYPES[datatype])
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, datatype, dt.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *(float(s) for s in spacing), 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), float(scl_slope), float(scl_inter))
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    hdr[344:348] = MAGIC
    return bytes(hdr) + np.asarray(arr, dtype=dt).tobytes(order="F")


def write_nifti(volume: Volume, path) -> None:
    """Float32 volume with identity scaling."""
    with open(path, "wb") as fh:
        fh.write(encode_nifti(volume.data.astype(np.float32), volume.spacing))
