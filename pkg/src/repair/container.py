"""Binary container used for datasets, encoder weights, and bank dumps.

Layout: a fixed 32-byte little-endian header followed by float32 records
and, for datasets, a trailing byte block with the hidden match flags.
Keeping the flags in their own block makes it easy to audit that the
training path never touches them.

Header fields: magic (4 bytes), version (u32), three u32 counts whose
meaning depends on the magic, one f32 scalar, and a u64 seed.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

_HEADER = struct.Struct("<4sIIIIfQ")
HEADER_SIZE = _HEADER.size  # 32 bytes

VERSION = 1

DATASET_MAGIC = b"PAIR"
WEIGHTS_MAGIC = b"ENCW"
BANK_MAGIC = b"BANK"


def write_header(fh: BinaryIO, magic: bytes, a: int, b: int, c: int,
                 scalar: float = 0.0, seed: int = 0) -> None:
    fh.write(_HEADER.pack(magic, VERSION, a, b, c, scalar, seed))


def read_header(fh: BinaryIO, expected_magic: bytes):
    """Read and validate a header, returning (a, b, c, scalar, seed)."""
    raw = fh.read(HEADER_SIZE)
    if len(raw) != HEADER_SIZE:
        raise FormatError("header: expected 32 bytes, file is shorter")
    magic, version, a, b, c, scalar, seed = _HEADER.unpack(raw)
    if magic != expected_magic:
        raise FormatError(f"magic: expected {expected_magic!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError(f"version: expected {VERSION}, found {version}")
    return a, b, c, scalar, seed


def write_f32_block(fh: BinaryIO, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32_block(fh: BinaryIO, shape: tuple[int, ...], name: str) -> np.ndarray:
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError(f"{name}: expected {count} float32 values, payload truncated")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def read_u8_block(fh: BinaryIO, count: int, name: str) -> np.ndarray:
    raw = fh.read(count)
    if len(raw) != count:
        raise FormatError(f"{name}: expected {count} bytes, payload truncated")
    return np.frombuffer(raw, dtype=np.uint8).copy()
