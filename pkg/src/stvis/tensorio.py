"""Binary tensor files and 8-bit greymaps.

Tensor file layout: 8-byte magic ``TAFTENS1``, little-endian u32 rank, one u32
per dimension, then the float64 payload in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TAFTENS1"


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:8] != MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {blob[:8]!r}")
    if len(blob) < 12:
        raise FormatError(f"truncated rank field at offset 8 (file has {len(blob)} bytes)")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims_end = 12 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError(f"truncated dimension list at offset 12: need {4 * rank} bytes for rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", blob, 12)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = dims_end + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"payload size mismatch at offset {dims_end}: expected {8 * count} bytes for shape "
            f"{tuple(shape)}, found {len(blob) - dims_end}"
        )
    return np.frombuffer(blob, dtype="<f8", offset=dims_end).astype(np.float64).reshape(shape)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated PGM header at offset {pos}")
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"bad PGM magic at offset 0: {tokens[0]!r}")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    pos += 1
    payload = blob[pos:]
    if len(payload) != width * height:
        raise FormatError(f"PGM payload at offset {pos} has {len(payload)} bytes, expected {width * height}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def to_greymap(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalize to uint8; returns the image and the raw min/max."""
    vals = np.asarray(values, dtype=np.float64)
    lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo
    scaled = (vals - lo) / span if span > 0 else np.zeros_like(vals)
    return np.round(scaled * 255).astype(np.uint8), lo, hi
