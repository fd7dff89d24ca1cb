"""On-disk formats: the JCG coefficient container, binary PGM covers, and raw
f64 planes (FPL1). All multi-byte fields are little-endian."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import BLOCK, DctGrid, ImagePlane, to_blocks

JCG_MAGIC = b"JCG1"
FPL_MAGIC = b"FPL1"


def write_jcg(path, grid: DctGrid) -> None:
    """magic, u32 width, u32 height, 64 x u16 quant table, then i16
    coefficients as a raster of 8x8 blocks (blocks row-major, coefficients
    within each block row-major)."""
    blocks = to_blocks(grid.coeffs)
    payload = np.ascontiguousarray(blocks, dtype="<i2").tobytes()
    with open(path, "wb") as fh:
        fh.write(JCG_MAGIC)
        fh.write(struct.pack("<II", grid.width, grid.height))
        fh.write(grid.quant_table.astype("<u2").tobytes())
        fh.write(payload)


def read_jcg(path) -> DctGrid:
    data = Path(path).read_bytes()
    if data[:4] != JCG_MAGIC:
        raise ValueError(f"{path}: not a JCG1 container")
    width, height = struct.unpack_from("<II", data, 4)
    if width % BLOCK or height % BLOCK:
        raise ValueError(f"{path}: dimensions must be multiples of {BLOCK}")
    qt = np.frombuffer(data, dtype="<u2", count=64, offset=12).reshape(BLOCK, BLOCK)
    coeffs = np.frombuffer(data, dtype="<i2", count=width * height, offset=12 + 128)
    if coeffs.size != width * height:
        raise ValueError(f"{path}: truncated coefficient payload")
    blocks = coeffs.reshape(height // BLOCK, width // BLOCK, BLOCK, BLOCK)
    plane = blocks.transpose(0, 2, 1, 3).reshape(height, width)
    return DctGrid(coeffs=plane, quant_table=qt.astype(np.uint16))


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary 8-bit PGM (P5)."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ValueError("PGM plane must be 2-D")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    # Header: three whitespace-separated tokens after P5, '#' starts a comment.
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    if pixels.size != w * h:
        raise ValueError(f"{path}: truncated pixel payload")
    return pixels.reshape(h, w).copy()


def write_fpl(path, plane: ImagePlane | np.ndarray) -> None:
    """Raw f64 plane: magic, u32 width, u32 height, then w*h f64 row-major."""
    arr = plane.values if isinstance(plane, ImagePlane) else np.asarray(plane, dtype=np.float64)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(FPL_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_fpl(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FPL_MAGIC:
        raise ValueError(f"{path}: not an FPL1 plane")
    w, h = struct.unpack_from("<II", data, 4)
    values = np.frombuffer(data, dtype="<f8", count=w * h, offset=12)
    if values.size != w * h:
        raise ValueError(f"{path}: truncated payload")
    return values.reshape(h, w).copy()
