"""Binary tensor format.

Layout (all integers little-endian uint64)::

    b"EFT1" | dtype code | rank | extent_0 .. extent_{rank-1} | row-major payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import IntegrityError

MAGIC = b"EFT1"
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.asarray(getattr(array, "data", array))
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<QQ", _CODE_OF[dt], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise IntegrityError(f"bad tensor magic {magic!r}")
    head = fh.read(16)
    if len(head) != 16:
        raise IntegrityError("truncated tensor header")
    code, rank = struct.unpack("<QQ", head)
    if code not in DTYPE_CODES:
        raise IntegrityError(f"unknown dtype code {code}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise IntegrityError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    dt = DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise IntegrityError(f"truncated tensor payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"missing tensor blob {path}")
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensors(path, named: dict) -> None:
    """Concatenate several named tensors; names go in a leading uint8 tensor."""
    with open(path, "wb") as fh:
        write_tensor(fh, np.array([len(named)], dtype="<i8"))
        for name, arr in named.items():
            write_tensor(fh, np.frombuffer(name.encode(), dtype=np.uint8).astype("<i8"))
            write_tensor(fh, arr)


def load_tensors(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"missing tensor blob {path}")
    with open(path, "rb") as fh:
        count = int(read_tensor(fh)[0])
        out = {}
        for _ in range(count):
            name = bytes(read_tensor(fh).astype(np.uint8)).decode()
            out[name] = read_tensor(fh)
        return out


def to_bytes(array) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
