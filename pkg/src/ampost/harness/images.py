"""Binary PGM/PPM output for reconstructions."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


def quantize(values) -> np.ndarray:
    """Clamp to ``[0, 1]`` and round to 8-bit levels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.rint(v * 255.0).astype(np.uint8)


def emit_image(signal, shape, path) -> Path:
    """Write ``signal`` as a P5 (one channel) or P6 (three channel) image.

    ``shape`` is ``(rows, cols)`` or ``(rows, cols, 3)``; a point-cloud signal
    on a latitude/longitude grid is passed with ``(n_lat, n_lon)``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        magic = b"P5"
    elif len(shape) == 3 and shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {shape}")
    pix = quantize(np.asarray(signal).reshape(shape))
    rows, cols = shape[0], shape[1]
    path = Path(path)
    header = magic + f"\n{cols} {rows}\n255\n".encode("ascii")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(pix.tobytes())
    os.replace(tmp, path)
    return path


def read_image(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`emit_image`; returns uint8 pixels."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace before the raster
    magic, cols, rows, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError("only 8-bit binary PGM/PPM is supported")
    channels = 1 if magic == b"P5" else 3
    raw = np.frombuffer(data, dtype=np.uint8, count=rows * cols * channels, offset=pos)
    return raw.reshape((rows, cols) if channels == 1 else (rows, cols, 3)).copy()
