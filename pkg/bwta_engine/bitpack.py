"""
Bit-packing of quantized matrices into 64-bit words.

Element k of a row lives in word k // 64, bit k % 64 (LSB-first). Rows are padded
independently to whole words and padding bits are always zero.
"""

from typing import Union

import numpy as np
import structlog

from .errors import CorruptPackError, DomainError
from .models import WORD_BITS, PackKind, PackedBinaryMatrix, PackedTernaryMatrix, words_per_row
from .quant import scaled
from .tensor import as_dense, as_int

logger = structlog.get_logger(__name__)

Packed = Union[PackedBinaryMatrix, PackedTernaryMatrix]


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean [rows x cols] array into [rows x ceil(cols/64)] uint64 words."""
    rows, cols = bits.shape
    padded = np.zeros((rows, words_per_row(cols) * WORD_BITS), dtype=np.uint8)
    padded[:, :cols] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")
    return packed.view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, cols: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, axis=1, bitorder="little")[:, :cols].astype(bool)


def padding_mask(cols: int, n_words: int) -> np.ndarray:
    """Per-word mask of the bits that hold real elements for a row of `cols` elements."""
    mask = np.zeros(n_words, dtype=np.uint64)
    full, rest = divmod(cols, WORD_BITS)
    mask[:full] = np.uint64(0xFFFFFFFFFFFFFFFF)
    if rest:
        mask[full] = np.uint64((1 << rest) - 1)
    return mask


def padding_is_clear(p: Packed) -> bool:
    mask = ~padding_mask(p.cols, p.words_per_row)
    planes = [p.words] if isinstance(p, PackedBinaryMatrix) else [p.pos, p.neg]
    return all(not np.any(plane & mask) for plane in planes)


def popcount_words(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(words, dtype=np.uint64))


def popcount_total(p: Packed) -> int:
    if isinstance(p, PackedBinaryMatrix):
        return int(popcount_words(p.words).sum())
    return int(popcount_words(p.pos).sum() + popcount_words(p.neg).sum())


def pack_sign(signs) -> PackedBinaryMatrix:
    """Pack a {-1, +1} matrix; bit set exactly where the entry is -1."""
    signs = as_int(signs, "signs")
    if not np.isin(signs, (-1, 1)).all():
        raise DomainError("pack_sign accepts only -1/+1 entries")
    rows, cols = signs.shape
    return PackedBinaryMatrix(rows, cols, PackKind.SIGN_NEG_IS_ONE, pack_bits(signs == -1))


def pack_ternary(a, scale: float) -> PackedTernaryMatrix:
    """Fused threshold-and-pack: pos where A/s >= 0.5, neg where A/s <= -0.5."""
    a = as_dense(a, "A")
    v = scaled(a, scale)
    rows, cols = a.shape
    return PackedTernaryMatrix(rows, cols, pack_bits(v >= 0.5), pack_bits(v <= -0.5))


def pack_bool(a, scale: float) -> PackedBinaryMatrix:
    """Fused threshold-and-pack of the boolean quantizer: bit set where A/s >= 0.5."""
    a = as_dense(a, "A")
    v = scaled(a, scale)
    rows, cols = a.shape
    return PackedBinaryMatrix(rows, cols, PackKind.BOOL_ONE_IS_ONE, pack_bits(v >= 0.5))


def pack_ternary_ints(q) -> PackedTernaryMatrix:
    """Pack an already-quantized {-1, 0, 1} matrix."""
    q = as_int(q, "q")
    if not np.isin(q, (-1, 0, 1)).all():
        raise DomainError("pack_ternary_ints accepts only -1/0/+1 entries")
    rows, cols = q.shape
    return PackedTernaryMatrix(rows, cols, pack_bits(q == 1), pack_bits(q == -1))


def unpack(p: Packed) -> np.ndarray:
    """Exact integer reconstruction of any packed matrix."""
    if isinstance(p, PackedTernaryMatrix):
        if np.any(p.pos & p.neg):
            rows, words = np.nonzero(p.pos & p.neg)
            raise CorruptPackError(
                f"ternary planes intersect (first at row {rows[0]}, word {words[0]})"
            )
        pos = unpack_bits(p.pos, p.cols).astype(np.int32)
        neg = unpack_bits(p.neg, p.cols).astype(np.int32)
        return pos - neg
    bits = unpack_bits(p.words, p.cols).astype(np.int32)
    if p.kind is PackKind.SIGN_NEG_IS_ONE:
        return 1 - 2 * bits
    return bits


def with_extra_padding(p: Packed, extra_words: int) -> Packed:
    """Copy of `p` with `extra_words` zero words appended to every row."""
    def grow(words: np.ndarray) -> np.ndarray:
        return np.hstack([words, np.zeros((words.shape[0], extra_words), dtype=np.uint64)])

    if isinstance(p, PackedTernaryMatrix):
        return PackedTernaryMatrix(p.rows, p.cols, grow(p.pos), grow(p.neg))
    return PackedBinaryMatrix(p.rows, p.cols, p.kind, grow(p.words))
