"""Binary PGM (P5) and PPM (P6) readers and writers, 8-bit only."""

from __future__ import annotations

import numpy as np


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.astype(np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {gray.shape}")
    _write(path, b"P5", gray)


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM wants an HxWx3 array, got shape {rgb.shape}")
    _write(path, b"P6", rgb)


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} header")
    # header = magic + three ASCII integers, separated by whitespace or comments
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    count = width * height * channels
    raster = data[pos : pos + count]
    if len(raster) != count:
        raise ValueError(f"{path}: expected {count} raster bytes, got {len(raster)}")
    arr = np.frombuffer(raster, np.uint8)
    shape = (height, width) if channels == 1 else (height, width, channels)
    return arr.reshape(shape).copy()


def read_pgm(path) -> np.ndarray:
    return _read(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read(path, b"P6", 3)
