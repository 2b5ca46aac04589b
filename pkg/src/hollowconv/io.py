"""Binary tensor files (LORCK1), named tensor bundles, and PGM/PPM images.

LORCK1 record layout::

    b"LORCK1" | dtype code (u8) | rank (u8) | rank x extent (u64 LE) | payload (LE, row-major)

dtype codes: 0 = float32, 1 = float64, 2 = uint8. A bundle (used for
checkpoints) is a plain concatenation of records alternating a rank-1 uint8
name record (UTF-8 bytes) and the tensor it names.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"LORCK1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint8): 2}


class FormatError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    code = _DTYPES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no LORCK1 code")
    if array.ndim > 255:
        raise FormatError("rank exceeds 255")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_CODES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray | None:
    """Read one record; ``None`` at a clean end of stream."""
    magic = fh.read(6)
    if not magic:
        return None
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    head = fh.read(2)
    if len(head) != 2:
        raise FormatError("truncated header")
    code, rank = struct.unpack("<BB", head)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = fh.read(8 * rank)
    if len(dims) != 8 * rank:
        raise FormatError("truncated extents")
    shape = struct.unpack(f"<{rank}Q", dims)
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError(f"truncated payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if arr is None:
            raise FormatError(f"{path}: empty file")
        return arr


def encode(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def save_bundle(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        for name, arr in tensors.items():
            write_tensor(fh, np.frombuffer(name.encode("utf-8"), dtype=np.uint8))
            write_tensor(fh, arr)
    os.replace(tmp, path)


def load_bundle(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        while True:
            name = read_tensor(fh)
            if name is None:
                return out
            arr = read_tensor(fh)
            if arr is None:
                raise FormatError(f"{path}: name record without a tensor")
            out[name.tobytes().decode("utf-8")] = arr


# ------------------------------------------------------------------ images
def to_uint8(image: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; constant images map to 0."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.round((image - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file written by this module."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    kind, w, h = tokens[0], int(tokens[1]), int(tokens[2])
    channels = {b"P5": 1, b"P6": 3}[kind]
    img = np.frombuffer(data[pos:pos + w * h * channels], dtype=np.uint8)
    return img.reshape((h, w) if channels == 1 else (h, w, 3))
