"""
The .bwta packed-matrix file format.

Little endian throughout:
- magic "BWTA" (4 bytes)
- version (1 byte, currently 1)
- kind (1 byte): 0 sign/neg-is-one, 1 bool/one-is-one, 2 ternary
- rows, cols (uint32 each)
- scale (IEEE-754 float32)
- words (uint64): rows * ceil(cols/64) for binary kinds, positive plane then negative plane for ternary
"""

import os
import struct
import tempfile
from typing import Tuple, Union

import numpy as np
import structlog

from .bitpack import padding_is_clear
from .errors import CorruptPackError, DomainError
from .models import PackKind, PackedBinaryMatrix, PackedTernaryMatrix, words_per_row

logger = structlog.get_logger(__name__)

MAGIC = b"BWTA"
VERSION = 1
_HEADER = struct.Struct("<4sBBIIf")

Packed = Union[PackedBinaryMatrix, PackedTernaryMatrix]


def _trimmed(words: np.ndarray, cols: int) -> np.ndarray:
    # extra zero padding words never reach the file
    return np.ascontiguousarray(words[:, :words_per_row(cols)], dtype="<u8")


def to_bytes(packed: Packed, scale: float) -> bytes:
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    header = _HEADER.pack(MAGIC, VERSION, packed.kind.value, packed.rows, packed.cols, scale)
    if isinstance(packed, PackedTernaryMatrix):
        body = _trimmed(packed.pos, packed.cols).tobytes() + _trimmed(packed.neg, packed.cols).tobytes()
    else:
        body = _trimmed(packed.words, packed.cols).tobytes()
    return header + body


def from_bytes(data: bytes) -> Tuple[Packed, float]:
    if len(data) < _HEADER.size:
        raise CorruptPackError(f"file too short for a header: {len(data)} bytes")
    magic, version, kind_byte, rows, cols, scale = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptPackError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptPackError(f"unsupported version {version}")
    try:
        kind = PackKind(kind_byte)
    except ValueError:
        raise CorruptPackError(f"unknown kind byte {kind_byte}") from None

    n_words = rows * words_per_row(cols)
    planes = 2 if kind is PackKind.TERNARY else 1
    expected = _HEADER.size + 8 * n_words * planes
    if len(data) != expected:
        raise CorruptPackError(f"expected {expected} bytes for {rows}x{cols} {kind.name}, got {len(data)}")

    words = np.frombuffer(data, dtype="<u8", offset=_HEADER.size).astype(np.uint64)
    words = words.reshape(planes, rows, words_per_row(cols))
    if kind is PackKind.TERNARY:
        packed = PackedTernaryMatrix(rows, cols, words[0].copy(), words[1].copy())
        if np.any(packed.pos & packed.neg):
            raise CorruptPackError("ternary planes intersect")
    else:
        packed = PackedBinaryMatrix(rows, cols, kind, words[0].copy())
    if not padding_is_clear(packed):
        raise CorruptPackError(f"padding bits past column {cols} are set")
    return packed, float(scale)


def write_bwta(path: str, packed: Packed, scale: float) -> None:
    """Write atomically: a failed write leaves no file behind."""
    data = to_bytes(packed, scale)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_path, path)
    except OSError:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.debug("wrote packed matrix", path=path, kind=packed.kind.name, rows=packed.rows, cols=packed.cols)


def read_bwta(path: str) -> Tuple[Packed, float]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"packed matrix not found: {path}")
    with open(path, "rb") as handle:
        return from_bytes(handle.read())
