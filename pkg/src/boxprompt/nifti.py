"""Minimal NIfTI-1 volume I/O.

Covers the subset this package needs: single-file .nii / .nii.gz, scalar
datatypes, scl slope/intercept scaling, and voxel spacing from pixdim.
Arrays are returned index-ordered (x, y, z) like the on-disk layout.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import IOFailure

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}

_HEADER_SIZE = 348


def _open(path):
    p = Path(path)
    if p.suffix == ".gz":
        return gzip.open(p, "rb")
    return open(p, "rb")


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read a NIfTI-1 file; returns (array, per-axis spacing in mm)."""
    try:
        with _open(path) as fh:
            raw = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER_SIZE:
        raise IOFailure(f"{path}: shorter than a NIfTI-1 header")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    bo = "<"
    if sizeof_hdr != _HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != _HEADER_SIZE:
            raise IOFailure(f"{path}: not a NIfTI-1 file")
        bo = ">"
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise IOFailure(f"{path}: unsupported magic {magic!r}")

    dim = struct.unpack_from(f"{bo}8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise IOFailure(f"{path}: unsupported dimensionality {ndim}")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    (datatype,) = struct.unpack_from(f"{bo}h", raw, 70)
    if datatype not in _DTYPES:
        raise IOFailure(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack_from(f"{bo}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{bo}f", raw, 108)
    slope, inter = struct.unpack_from(f"{bo}2f", raw, 112)

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
    count = int(np.prod(shape))
    start = int(vox_offset)
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # on-disk order is Fortran: first axis varies fastest
    arr = data.reshape(shape[::-1]).transpose(range(len(shape))[::-1])
    arr = np.asarray(arr, dtype=np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr * (slope if slope != 0.0 else 1.0) + inter
    spacing = tuple(float(abs(p)) for p in pixdim[1 : ndim + 1])
    return arr, spacing


def write_nifti(path, array: np.ndarray, spacing=None):
    """Write a float32 NIfTI-1 file (used for tests and exports)."""
    arr = np.asarray(array, dtype="<f4")
    ndim = arr.ndim
    if not 1 <= ndim <= 4:
        raise IOFailure(f"cannot write {ndim}-D volume")
    spacing = tuple(spacing) if spacing is not None else (1.0,) * ndim
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    dim = [ndim] + list(arr.shape) + [1] * (7 - ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, 16)  # float32
    struct.pack_into("<h", header, 72, 32)  # bitpix
    pixdim = [1.0] + list(spacing) + [1.0] * (7 - ndim)
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # slope, inter
    header[344:348] = b"n+1\x00"
    payload = arr.transpose(range(ndim)[::-1]).tobytes(order="C")
    p = Path(path)
    opener = gzip.open if p.suffix == ".gz" else open
    try:
        with opener(p, "wb") as fh:
            fh.write(bytes(header))
            fh.write(b"\x00" * 4)  # extension flag
            fh.write(payload)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
