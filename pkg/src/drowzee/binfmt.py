"""Little-endian binary container helpers shared by the dataset and checkpoint formats."""
from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ExtentMismatchError(FormatError):
    pass


class Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.what}: truncated at byte {self.pos} (needed {n}, have {len(self.buf) - self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize), dtype=dtype).copy()

    def expect_magic(self, magic: bytes) -> None:
        if len(self.buf) < len(magic):
            raise TruncatedFileError(f"{self.what}: file shorter than its magic header")
        got = self.take(len(magic))
        if got != magic:
            raise BadMagicError(f"{self.what}: bad magic {got!r}, expected {magic!r}")

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise ExtentMismatchError(
                f"{self.what}: {len(self.buf) - self.pos} trailing bytes after declared contents")


def u32(n: int) -> bytes:
    return struct.pack("<I", n)


def u64(n: int) -> bytes:
    return struct.pack("<Q", n)
