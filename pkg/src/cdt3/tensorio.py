"""Binary tensor container shared by checkpoints and datasets.

Layout (little-endian)::

    offset  size        field
    0       4           magic b"CDT3"
    4       2           uint16 version (= 1)
    6       1           uint8 dtype code (1 = float32, 2 = float64)
    7       1           uint8 rank
    8       8 * rank    uint64 dims
    ...     prod(dims) * itemsize   row-major payload
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CDT3"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_HEAD = struct.Struct("<4sHBB")


class FormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        raise FormatError(f"unsupported dtype {arr.dtype}; container stores float32/float64 only")
    code = 1 if arr.dtype.itemsize == 4 else 2
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes()
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + dims + payload


def decode_from(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one container at ``offset``; returns (array, next offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < _HEAD.size:
        raise FormatError(f"truncated header at byte {offset}")
    magic, version, code, rank = _HEAD.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {bytes(magic)!r} at byte {offset}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + _HEAD.size
    if len(buf) - pos < 8 * rank:
        raise FormatError(f"truncated dims at byte {pos}")
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dt = DTYPE_CODES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated payload at byte {pos}: need {nbytes}, have {len(buf) - pos}")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt).reshape(dims).astype(dt.newbyteorder("="), copy=True)
    return arr, pos + nbytes


def decode(data: bytes) -> np.ndarray:
    arr, end = decode_from(data)
    if end != len(data):
        raise FormatError(f"{len(data) - end} trailing bytes after container")
    return arr


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path, array) -> None:
    atomic_write_bytes(path, encode(array))


def load_tensor(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_tensors(path, arrays) -> list[int]:
    """Concatenate containers into one file; returns each container's byte offset."""
    buf = io.BytesIO()
    offsets = []
    for a in arrays:
        offsets.append(buf.tell())
        buf.write(encode(a))
    atomic_write_bytes(path, buf.getvalue())
    return offsets


def load_tensors(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(data):
        arr, pos = decode_from(data, pos)
        out.append(arr)
    return out
