"""Portable tensor file format.

Layout: magic "FVT1", u32 little-endian rank, rank x u32 dims, then raw
little-endian float32 values in row-major order.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FVT1"


class TensorFileError(ValueError):
    pass


def tensor_bytes(t: np.ndarray) -> bytes:
    t = np.ascontiguousarray(t, dtype=np.float32)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + t.astype("<f4").tobytes()


def save_tensor(t: np.ndarray, path) -> None:
    Path(path).write_bytes(tensor_bytes(t))


def read_tensor_from(buf: bytes, offset: int = 0):
    """Parse one tensor starting at offset; returns (array, next_offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFileError(f"bad magic at offset {offset}")
    pos = offset + 4
    if len(buf) < pos + 4:
        raise TensorFileError(f"truncated rank field at offset {pos}")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank > 32:
        raise TensorFileError(f"implausible rank {rank} at offset {offset + 4}")
    if len(buf) < pos + 4 * rank:
        raise TensorFileError(f"truncated dims at offset {pos}")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise TensorFileError(f"truncated data at offset {pos}: "
                              f"need {4 * count} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    return data.reshape(dims).astype(np.float32), end


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    t, end = read_tensor_from(buf, 0)
    if end != len(buf):
        raise TensorFileError(f"trailing {len(buf) - end} bytes after tensor data")
    return t
