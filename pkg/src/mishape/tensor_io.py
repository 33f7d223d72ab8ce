"""JTNS binary tensor container and named-tensor archives.

Single tensor layout (all integers little-endian)::

    b"JTNS" | version:u8 | dtype:u8 (0=f64, 1=i64) | rank:u8 | extents:u64*rank | payload

An archive is ``b"JTNA" | version:u8 | count:u32`` followed by ``count``
entries of ``name_len:u16 | utf-8 name | JTNS record``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"JTNS"
ARCHIVE_MAGIC = b"JTNA"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}


class FormatError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    if np.issubdtype(arr.dtype, np.floating):
        return 0
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return 1
    raise FormatError(f"unsupported dtype {arr.dtype}")


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    fh.write(MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise FormatError("not a JTNS record")
    version, code, rank = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported JTNS version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise FormatError("truncated payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def dumps_tensor(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def loads_tensor(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<BI", VERSION, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            write_tensor(fh, arr)


def load_archive(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        head = fh.read(9)
        if len(head) != 9 or head[:4] != ARCHIVE_MAGIC:
            raise FormatError(f"{path}: not a JTNA archive")
        _, count = struct.unpack("<BI", head[4:])
        for _ in range(count):
            (n,) = struct.unpack("<H", fh.read(2))
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out


def write_ppm(path, image) -> None:
    """Write an ``(H, W, 3)`` image in [0, 1] (or an ``(H, W)`` gray image) as binary P6."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise FormatError("not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval
