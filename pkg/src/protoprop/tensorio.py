"""Binary tensor blobs.

Each record is::

    b"PPT1" | rank: uint32 | dims: rank x uint64 | values: float64 row-major

all little-endian.  A file may hold several records back to back.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import ContractError

MAGIC = b"PPT1"
_LE_F64 = np.dtype("<f8")


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(array, dtype=np.float64)
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(_LE_F64).tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise ContractError("truncated tensor blob")
    return np.frombuffer(raw, dtype=_LE_F64).astype(np.float64).reshape(dims)


def save_tensors(path, arrays: Iterable) -> None:
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list[np.ndarray]:
    path = Path(path)
    size = path.stat().st_size
    out = []
    with open(path, "rb") as fh:
        while fh.tell() < size:
            out.append(read_tensor(fh))
    return out


def tensor_to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
