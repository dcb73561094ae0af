"""Binary file formats used by datasets, checkpoints and predictions.

Tensor files ("T1" format) are little-endian:

    bytes 0-3   magic b"ATN1"
    u32         rank
    rank * u32  dims
    payload     float32, row-major

Label images use binary PGM (P5, maxval 255).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"ATN1"


def write_tensor(path, array) -> None:
    """Write an array as a T1 tensor file (payload stored as float32)."""
    arr = np.asarray(array)
    if arr.ndim < 1 or arr.ndim > 4:
        raise DataError(f"T1 tensors are rank 1-4, got rank {arr.ndim}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path, dtype=np.float64) -> np.ndarray:
    """Read a T1 tensor file. Returns float64 by default."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank < 1 or rank > 4:
        raise DataError(f"{path}: bad rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype="<f4", count=count, offset=8 + 4 * rank)
    if payload.size != count:
        raise DataError(f"{path}: truncated payload")
    return payload.reshape(dims).astype(dtype)


def write_pgm(path, image) -> None:
    """Write a 2-D uint8 array as binary PGM (P5)."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise DataError(f"PGM images are 2-D, got shape {img.shape}")
    img = img.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, separated by whitespace
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=pos)
    if data.size != h * w:
        raise DataError(f"{path}: truncated payload")
    return data.reshape(h, w).copy()
