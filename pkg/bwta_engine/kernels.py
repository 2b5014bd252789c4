"""
Popcount matrix-multiply kernels for the three BWTA arithmetic rules.

Case 1  binary x ternary  (linear layers):   pc(w ^ a+) - pc(w ^ a-)
Case 2  bool x ternary    (Att x V):         pc(att & v+) - pc(att & v-)
Case 3  ternary x ternary (Q x K^T):         pc(q+ & k+) + pc(q- & k-) - pc(q+ & k-) - pc(q- & k+)

Every kernel walks row_tile x col_tile micro-tiles of the output with the word loop
innermost and returns raw int32 dot products; scaling happens in the layers.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Optional, Union

import numpy as np
import structlog
from numba import njit

from .errors import DomainError, KindError, ShapeMismatchError
from .models import (
    MAX_REDUCTION_DIM,
    BenchCase,
    KernelConfig,
    PackKind,
    PackedBinaryMatrix,
    PackedTernaryMatrix,
)

logger = structlog.get_logger(__name__)

Packed = Union[PackedBinaryMatrix, PackedTernaryMatrix]

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@njit(nogil=True, cache=True)
def _popcount(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return np.int64((x * _H01) >> _S56)


# Word steps: fold one word pair into the accumulator. The kernels compile them
# with the SWAR popcount; count_word_ops replays them on counting stand-ins.

def _case1_step(pc):
    def step(acc, wi, ap, an):
        return acc + pc(wi ^ ap) - pc(wi ^ an)
    return step


def _case1_naive_and_step(pc):
    def step(acc, w_neg, ap, an):
        w_pos = ~w_neg
        return acc + pc(w_pos & ap) + pc(w_neg & an) - pc(w_pos & an) - pc(w_neg & ap)
    return step


def _case2_step(pc):
    def step(acc, ai, vp, vn):
        return acc + pc(ai & vp) - pc(ai & vn)
    return step


def _case3_step(pc):
    def step(acc, qp, qn, kp, kn):
        return acc + pc(qp & kp) + pc(qn & kn) - pc(qp & kn) - pc(qn & kp)
    return step


_WORD_STEPS = {
    BenchCase.CASE1: _case1_step,
    BenchCase.CASE1_NAIVE_AND: _case1_naive_and_step,
    BenchCase.CASE2: _case2_step,
    BenchCase.CASE3: _case3_step,
}

_case1_word = njit(nogil=True)(_case1_step(_popcount))
_case1_naive_and_word = njit(nogil=True)(_case1_naive_and_step(_popcount))
_case2_word = njit(nogil=True)(_case2_step(_popcount))
_case3_word = njit(nogil=True)(_case3_step(_popcount))


class _CountedWord:
    """Stand-in machine word that tallies every operation applied to it."""

    def __init__(self, counts: Dict[str, int]):
        self.counts = counts

    def _op(self, kind: str) -> "_CountedWord":
        self.counts[kind] += 1
        return _CountedWord(self.counts)

    def __xor__(self, other):
        return self._op("logic")

    def __and__(self, other):
        return self._op("logic")

    def __invert__(self):
        return self._op("logic")

    def __add__(self, other):
        return self._op("addsub")

    def __sub__(self, other):
        return self._op("addsub")


def count_word_ops(case: BenchCase) -> Dict[str, int]:
    """Logic ops, popcounts and add/subs one kernel spends per word pair, traced from its word step."""
    try:
        make_step = _WORD_STEPS[case]
    except KeyError:
        raise DomainError(f"{case.value} is not a popcount kernel") from None
    counts = {"logic": 0, "popcount": 0, "addsub": 0}

    def popcount(word: _CountedWord) -> _CountedWord:
        return word._op("popcount")

    step = make_step(popcount)
    step(*(_CountedWord(counts) for _ in range(step.__code__.co_argcount)))
    return counts


KERNEL_WORD_OPS: Dict[BenchCase, Dict[str, int]] = {case: count_word_ops(case) for case in _WORD_STEPS}


@njit(nogil=True, cache=True)
def _case1_rows(w, a_pos, a_neg, out, row_start, row_stop, row_tile, col_tile):
    n_cols = a_pos.shape[0]
    n_words = w.shape[1]
    for m0 in range(row_start, row_stop, row_tile):
        m1 = min(m0 + row_tile, row_stop)
        for n0 in range(0, n_cols, col_tile):
            n1 = min(n0 + col_tile, n_cols)
            for m in range(m0, m1):
                for n in range(n0, n1):
                    acc = 0
                    for i in range(n_words):
                        acc = _case1_word(acc, w[m, i], a_pos[n, i], a_neg[n, i])
                    out[m, n] = acc


@njit(nogil=True, cache=True)
def _case1_naive_and_rows(w, a_pos, a_neg, out, row_start, row_stop, row_tile, col_tile):
    n_cols = a_pos.shape[0]
    n_words = w.shape[1]
    for m0 in range(row_start, row_stop, row_tile):
        m1 = min(m0 + row_tile, row_stop)
        for n0 in range(0, n_cols, col_tile):
            n1 = min(n0 + col_tile, n_cols)
            for m in range(m0, m1):
                for n in range(n0, n1):
                    acc = 0
                    for i in range(n_words):
                        acc = _case1_naive_and_word(acc, w[m, i], a_pos[n, i], a_neg[n, i])
                    out[m, n] = acc


@njit(nogil=True, cache=True)
def _case2_rows(att, v_pos, v_neg, out, row_start, row_stop, row_tile, col_tile):
    n_cols = v_pos.shape[0]
    n_words = att.shape[1]
    for m0 in range(row_start, row_stop, row_tile):
        m1 = min(m0 + row_tile, row_stop)
        for n0 in range(0, n_cols, col_tile):
            n1 = min(n0 + col_tile, n_cols)
            for m in range(m0, m1):
                for n in range(n0, n1):
                    acc = 0
                    for i in range(n_words):
                        acc = _case2_word(acc, att[m, i], v_pos[n, i], v_neg[n, i])
                    out[m, n] = acc


@njit(nogil=True, cache=True)
def _case3_rows(q_pos, q_neg, k_pos, k_neg, out, row_start, row_stop, row_tile, col_tile):
    n_cols = k_pos.shape[0]
    n_words = q_pos.shape[1]
    for m0 in range(row_start, row_stop, row_tile):
        m1 = min(m0 + row_tile, row_stop)
        for n0 in range(0, n_cols, col_tile):
            n1 = min(n0 + col_tile, n_cols)
            for m in range(m0, m1):
                for n in range(n0, n1):
                    acc = 0
                    for i in range(n_words):
                        acc = _case3_word(acc, q_pos[m, i], q_neg[m, i], k_pos[n, i], k_neg[n, i])
                    out[m, n] = acc


def _check_operands(op: str, left: Packed, right: Packed) -> None:
    if left.cols != right.cols or left.words_per_row != right.words_per_row:
        raise ShapeMismatchError(
            op, left.shape, right.shape,
            f"K {left.cols} vs {right.cols}, words {left.words_per_row} vs {right.words_per_row}",
        )
    if left.cols > MAX_REDUCTION_DIM:
        raise DomainError(f"{op}: K={left.cols} exceeds the int32 accumulator cap {MAX_REDUCTION_DIM}")


def _require_kind(op: str, packed: Packed, kind: PackKind) -> None:
    if packed.kind is not kind:
        raise KindError(f"{op}: expected {kind.name} operand, got {packed.kind.name}")


def _launch(kernel: Callable, operands: tuple, m_rows: int, n_rows: int, cfg: Optional[KernelConfig]) -> np.ndarray:
    cfg = cfg or KernelConfig()
    out = np.zeros((m_rows, n_rows), dtype=np.int32)
    workers = cfg.workers or os.cpu_count() or 1
    if not cfg.parallel or workers == 1 or m_rows <= cfg.row_tile:
        kernel(*operands, out, 0, m_rows, cfg.row_tile, cfg.col_tile)
        return out

    # whole row tiles per block so workers never share an output row
    tiles = -(-m_rows // cfg.row_tile)
    per_block = -(-tiles // workers) * cfg.row_tile
    blocks = [(start, min(start + per_block, m_rows)) for start in range(0, m_rows, per_block)]
    with ThreadPoolExecutor(max_workers=min(workers, len(blocks))) as pool:
        futures = [
            pool.submit(kernel, *operands, out, start, stop, cfg.row_tile, cfg.col_tile)
            for start, stop in blocks
        ]
        for future in futures:
            future.result()
    return out


def gemm_case1(w: PackedBinaryMatrix, a: PackedTernaryMatrix, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Binary weights [M x K] times ternary activations [N x K] -> [M x N]."""
    _require_kind("gemm_case1", w, PackKind.SIGN_NEG_IS_ONE)
    _require_kind("gemm_case1", a, PackKind.TERNARY)
    _check_operands("gemm_case1", w, a)
    return _launch(_case1_rows, (w.words, a.pos, a.neg), w.rows, a.rows, cfg)


def gemm_case1_naive_and(w: PackedBinaryMatrix, a: PackedTernaryMatrix, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Case 1 through four ANDs and one NOT; same results as gemm_case1."""
    _require_kind("gemm_case1_naive_and", w, PackKind.SIGN_NEG_IS_ONE)
    _require_kind("gemm_case1_naive_and", a, PackKind.TERNARY)
    _check_operands("gemm_case1_naive_and", w, a)
    return _launch(_case1_naive_and_rows, (w.words, a.pos, a.neg), w.rows, a.rows, cfg)


def gemm_case2(att: PackedBinaryMatrix, v: PackedTernaryMatrix, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Boolean attention [M x K] times ternary values [N x K] -> [M x N]."""
    _require_kind("gemm_case2", att, PackKind.BOOL_ONE_IS_ONE)
    _require_kind("gemm_case2", v, PackKind.TERNARY)
    _check_operands("gemm_case2", att, v)
    return _launch(_case2_rows, (att.words, v.pos, v.neg), att.rows, v.rows, cfg)


def gemm_case3(q: PackedTernaryMatrix, k: PackedTernaryMatrix, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Ternary queries [M x K] times ternary keys [N x K] -> [M x N]."""
    _require_kind("gemm_case3", q, PackKind.TERNARY)
    _require_kind("gemm_case3", k, PackKind.TERNARY)
    _check_operands("gemm_case3", q, k)
    return _launch(_case3_rows, (q.pos, q.neg, k.pos, k.neg), q.rows, k.rows, cfg)


_KERNELS = {
    BenchCase.CASE1: gemm_case1,
    BenchCase.CASE1_NAIVE_AND: gemm_case1_naive_and,
    BenchCase.CASE2: gemm_case2,
    BenchCase.CASE3: gemm_case3,
}


def run_kernel(case: BenchCase, left: Packed, right: Packed, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    try:
        kernel = _KERNELS[case]
    except KeyError:
        raise DomainError(f"{case.value} is not a popcount kernel") from None
    return kernel(left, right, cfg)


def logic_ops_per_output(case: BenchCase, n_words: int) -> int:
    """Bitwise logic instructions spent on one output element."""
    return KERNEL_WORD_OPS[case]["logic"] * n_words
