"""Raw float32 array files.

Layout (little-endian)::

    b"F32A"            4-byte magic
    uint32 ndim
    uint32 dims[ndim]
    float32 data       row-major (C order), prod(dims) values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"F32A"


def write_array(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a float32 array file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - offset != 4 * count:
        raise ValueError(f"{path}: payload size does not match header shape {shape}")
    return np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
