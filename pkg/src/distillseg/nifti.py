"""Minimal single-file NIfTI-1 reader/writer for 3D volumes.

Covers exactly what the on-disk case layout needs: gzipped or plain
single-file NIfTI (.nii.gz / .nii), 3D arrays, the common numeric dtypes,
and slope/intercept rescaling on read. Arrays are handed around as
C-contiguous (D, H, W); on disk the first dimension varies fastest, so we
serialize in Fortran order, which keeps voxel (d, h, w) at the same index
for any standard NIfTI reader.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4 extension-flag bytes

# NIfTI-1 datatype codes.
_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


def _open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def write_volume(data: np.ndarray, path) -> None:
    """Write a 3D array as a single-file NIfTI-1 volume (gzipped if *.gz)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    if data.dtype not in _CODE_FOR_DTYPE:
        raise ValueError(f"unsupported dtype {data.dtype}")
    code = _CODE_FOR_DTYPE[data.dtype]
    bitpix = data.dtype.itemsize * 8

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = (3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, bitpix)
    pixdim = (1.0,) * 8
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    # Identity sform so viewers get a usable orientation.
    struct.pack_into("<h", header, 254, 1)
    struct.pack_into("<4f", header, 280, 1.0, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, 1.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, 1.0, 0.0)
    header[344:348] = b"n+1\x00"

    try:
        with _open(path, "wb") as f:
            f.write(bytes(header))
            f.write(b"\x00\x00\x00\x00")
            f.write(np.asfortranarray(data).tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"cannot write volume to {path}: {exc}") from exc


def read_volume(path) -> np.ndarray:
    """Read a single-file NIfTI-1 volume into a C-contiguous 3D array."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"volume file not found: {path}")
    try:
        with _open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read volume {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise LoadError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise LoadError(f"{path}: not a NIfTI-1 file (magic {magic!r})")

    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        end = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise LoadError(f"{path}: bad sizeof_hdr {sizeof_hdr}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise LoadError(f"{path}: invalid dim[0] = {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    extra = tuple(d for d in shape[3:] if d != 1)
    if len(shape) > 3 and extra:
        raise LoadError(f"{path}: expected a 3D volume, got dims {shape}")
    shape = (shape + (1, 1, 1))[:3]

    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    if datatype not in _DTYPE_CODES:
        raise LoadError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder(end)

    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    (scl_slope,) = struct.unpack_from(end + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(end + "f", raw, 116)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET

    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise LoadError(f"{path}: data section truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = np.ascontiguousarray(flat.reshape(shape, order="F").astype(dtype.newbyteorder("=")))

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * np.float32(slope) + np.float32(scl_inter)
    return data
