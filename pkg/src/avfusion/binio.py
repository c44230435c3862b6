"""Little-endian binary primitives shared by the checkpoint and dataset formats."""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np


class FileFormatError(Exception):
    """Base class for malformed binary files."""


class BadMagicError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


def read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"truncated file: expected {n} bytes for {what}, got {len(buf)}")
    return buf


def expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(len(magic))
    if got != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {got!r}")


def expect_version(f: BinaryIO, version: int) -> None:
    got = read_u32(f, "version")
    if got != version:
        raise VersionMismatchError(f"version mismatch: expected {version}, got {got}")


def read_u8(f: BinaryIO, what: str = "u8") -> int:
    return struct.unpack("<B", read_exact(f, 1, what))[0]


def read_u16(f: BinaryIO, what: str = "u16") -> int:
    return struct.unpack("<H", read_exact(f, 2, what))[0]


def read_u32(f: BinaryIO, what: str = "u32") -> int:
    return struct.unpack("<I", read_exact(f, 4, what))[0]


def write_u8(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<B", value))


def write_u16(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<H", value))


def write_u32(f: BinaryIO, value: int) -> None:
    f.write(struct.pack("<I", value))


def write_f32_array(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_array(f: BinaryIO, shape: tuple[int, ...], what: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    buf = read_exact(f, 4 * count, what)
    return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
