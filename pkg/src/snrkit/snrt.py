"""SNRT v1 tensor files.

Layout: b"SNRT", u8 version (1), u8 dtype, u16 rank, rank x u32 extents,
then the row-major payload; every multi-byte field is little-endian.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SNRT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class SnrtFormatError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in CODES:
        arr = arr.astype(np.float32)
    code = CODES[arr.dtype]
    if arr.ndim > 0xFFFF:
        raise SnrtFormatError("rank too large")
    header = MAGIC + struct.pack("<BBH", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise SnrtFormatError("bad magic")
    version, code, rank = struct.unpack_from("<BBH", buf, 4)
    if version != VERSION:
        raise SnrtFormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise SnrtFormatError(f"unknown dtype code {code}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise SnrtFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    dt = DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise SnrtFormatError("payload size does not match extents")
    return np.frombuffer(buf, dtype=dt, offset=off, count=count).reshape(shape).astype(dt.newbyteorder("="))


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_many(path, arrays: dict[str, np.ndarray]) -> None:
    """Write one SNRT file per entry into directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        save(root / f"{name}.snrt", arr)


def load_many(path) -> dict[str, np.ndarray]:
    return {p.stem: load(p) for p in sorted(Path(path).glob("*.snrt"))}


__all__ = ["dumps", "loads", "save", "load", "save_many", "load_many", "SnrtFormatError"]
