"""Binary tensor container shared by datasets, measurements and checkpoints.

Layout (little endian)::

    b"AMP1" | u32 count | count x ( u16 name_len | name utf-8 | u8 rank |
                                    rank x u64 dim | float64 payload )
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"AMP1"
MAX_ELEMENTS = 1 << 34


class ContainerError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ContainerError("rank exceeds 255")
        if any(d == 0 for d in arr.shape):
            raise ContainerError(f"tensor {name!r} has a zero dimension")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).astype("<f8", copy=False).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if len(view) < 8 or bytes(view[:4]) != MAGIC:
        raise ContainerError("bad magic")
    (count,) = struct.unpack_from("<I", view, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n: int) -> None:
        if pos + n > len(view):
            raise ContainerError("truncated payload")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        need(nlen + 1)
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        rank = view[pos]
        pos += 1
        need(8 * rank)
        dims = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        n = 1
        for d in dims:
            if d == 0:
                raise ContainerError(f"tensor {name!r} has a zero dimension")
            n *= d
            if n > MAX_ELEMENTS:
                raise ContainerError(f"dim overflow in tensor {name!r}")
        need(8 * n)
        arr = np.frombuffer(view[pos:pos + 8 * n], dtype="<f8").astype(np.float64).reshape(dims)
        pos += 8 * n
        out[name] = arr
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes")
    return out


def write_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    data = encode(tensors)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
