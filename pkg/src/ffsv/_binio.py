"""Little-endian struct helpers shared by the binary artifact formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import ArchiveFormatError

FORMAT_VERSION = 1


def write_header(fh: BinaryIO, magic: bytes, version: int = FORMAT_VERSION) -> None:
    fh.write(magic)
    write_u32(fh, version)


def read_header(fh: BinaryIO, magic: bytes) -> int:
    got = fh.read(len(magic))
    if got != magic:
        raise ArchiveFormatError(f"bad magic {got!r}, expected {magic!r}")
    version = read_u32(fh)
    if version != FORMAT_VERSION:
        raise ArchiveFormatError(f"unsupported version {version}")
    return version


def read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ArchiveFormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def write_f64(fh: BinaryIO, value: float) -> None:
    fh.write(struct.pack("<d", value))


def read_f64(fh: BinaryIO) -> float:
    return struct.unpack("<d", read_exact(fh, 8))[0]


def write_str(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    return read_exact(fh, n).decode("utf-8")


def write_array(fh: BinaryIO, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_array(fh: BinaryIO, shape: tuple[int, ...], dtype: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    itemsize = np.dtype(dtype).itemsize
    raw = read_exact(fh, count * itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
