"""QTZ1 binary tensor container.

Layout: magic ``b"QTZ1"``, one ``u8`` rank, ``rank`` little-endian ``u32`` dims,
then the row-major payload as little-endian ``f64``.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"QTZ1"


class FormatError(ValueError):
    pass


def dumps(x) -> bytes:
    x = np.asarray(x, dtype="<f8")  # tobytes() is row-major; keeps 0-d arrays 0-d
    if x.ndim > 255:
        raise FormatError(f"rank {x.ndim} exceeds the u8 rank field")
    header = MAGIC + struct.pack("<B", x.ndim) + struct.pack(f"<{x.ndim}I", *x.shape)
    return header + x.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    rank = buf[4]
    dims = struct.unpack_from(f"<{rank}I", buf, 5)
    offset = 5 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) != offset + 8 * count:
        raise FormatError(f"payload is {len(buf) - offset} bytes, expected {8 * count}")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return data.reshape(dims).astype(np.float64)


def save(path: str | os.PathLike, x) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(x))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
