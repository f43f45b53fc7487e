"""PTN1 portable tensor files.

Layout: ``b"PTN1"``, u32 rank, rank x u32 dims, then little-endian float32
values in row-major order.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PTN1"


class PTNFormatError(ValueError):
    pass


def dumps(array) -> bytes:
    # np.asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
    a = np.asarray(array, dtype="<f4")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise PTNFormatError(f"bad magic {buf[:4]!r}")
    if len(buf) < 8:
        raise PTNFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise PTNFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * n:
        raise PTNFormatError(f"expected {n} float32 values, got {(len(buf) - off) / 4:g}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float64)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
