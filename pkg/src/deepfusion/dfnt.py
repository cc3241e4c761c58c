"""Reader and writer for the DFNT binary tensor format.

Layout (all little-endian)::

    b"DFNT" | u32 version (=1) | u32 rank | rank x u32 dims | float32 values, row-major
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"DFNT"
VERSION = 1


class DFNTError(ValueError):
    """Raised for malformed or mismatched DFNT files."""


def write(path: str | os.PathLike, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DFNTError(f"{path}: not a DFNT file")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DFNTError(f"{path}: unsupported DFNT version {version}")
    offset = 12 + 4 * rank
    if len(blob) < offset:
        raise DFNTError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) != offset + 4 * count:
        raise DFNTError(f"{path}: expected {count} values for dims {dims}, got {(len(blob) - offset) // 4}")
    return np.frombuffer(blob, dtype="<f4", offset=offset, count=count).reshape(dims).astype(np.float32)
