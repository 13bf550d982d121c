"""Little-endian binary primitives shared by the file codecs."""

from __future__ import annotations

import contextlib
import os
import struct
from typing import BinaryIO, Iterator

import numpy as np

from .errors import FormatError


def _take(fh: BinaryIO, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f"unexpected end of file (wanted {count} bytes, got {len(data)})")
    return data


def write_u32(fh: BinaryIO, value: int) -> None:
    if not 0 <= value < 2**32:
        raise ValueError(f"value {value} does not fit in u32")
    fh.write(struct.pack("<I", value))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _take(fh, 4))[0]


def write_str(fh: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    write_u32(fh, len(data))
    fh.write(data)


def read_str(fh: BinaryIO) -> str:
    length = read_u32(fh)
    return _take(fh, length).decode("utf-8")


def write_f64_array(fh: BinaryIO, values: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def read_f64_array(fh: BinaryIO, count: int) -> np.ndarray:
    return np.frombuffer(_take(fh, 8 * count), dtype="<f8").astype(np.float64)


def expect_magic(fh: BinaryIO, magic: bytes) -> None:
    got = _take(fh, len(magic))
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {got!r}")


@contextlib.contextmanager
def atomic_writer(path: str, mode: str = "wb") -> Iterator:
    """Write to a temp file next to `path` and rename into place on success."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, mode) as fh:
            yield fh
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
