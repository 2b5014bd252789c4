"""
Oracle-equivalence suite behind `bwta verify`.

Every trial draws fresh shapes and operands from its own seed, so a failure can be
replayed from the reported (check, seed, shape) alone.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import structlog

from .bitpack import (
    pack_bool,
    pack_sign,
    pack_ternary_ints,
    padding_is_clear,
    popcount_words,
    unpack,
    unpack_bits,
    with_extra_padding,
)
from .kernels import run_kernel
from .models import WORD_BITS, BenchCase, KernelConfig, PackedTernaryMatrix
from .tensor import gemm_int_oracle, random_signs, random_ternary

logger = structlog.get_logger(__name__)

KERNEL_CASES = (BenchCase.CASE1, BenchCase.CASE1_NAIVE_AND, BenchCase.CASE2, BenchCase.CASE3)
IDENTITY_WORDS = 100_000

Mutation = Callable[[PackedTernaryMatrix], PackedTernaryMatrix]


@dataclass
class Counterexample:
    check: str
    seed: int
    shape: Tuple[int, ...]
    index: Optional[Tuple[int, ...]] = None
    expected: Optional[int] = None
    got: Optional[int] = None

    def describe(self) -> str:
        text = f"{self.check} failed: seed={self.seed} shape={self.shape}"
        if self.index is not None:
            text += f" index={self.index} expected={self.expected} got={self.got}"
        return text


@dataclass
class VerifyResult:
    trials: int
    checks: Dict[str, int] = field(default_factory=dict)
    counterexample: Optional[Counterexample] = None

    @property
    def passed(self) -> bool:
        return self.counterexample is None

    def summary(self) -> str:
        if not self.passed:
            return f"FAIL: {self.counterexample.describe()}"
        if self.trials == 0:
            return "PASS (vacuous: 0 trials)"
        counts = ", ".join(f"{name}={count}" for name, count in self.checks.items())
        return f"PASS: {counts}"


def _first_mismatch(expected: np.ndarray, got: np.ndarray) -> Tuple[Tuple[int, ...], int, int]:
    where = tuple(int(i) for i in np.argwhere(expected != got)[0])
    return where, int(expected[where]), int(got[where])


def _operands(case: BenchCase, rng: np.random.Generator, m: int, n: int, k: int, seed: int):
    if case in (BenchCase.CASE1, BenchCase.CASE1_NAIVE_AND):
        left_ints = random_signs(m, k, seed)
        left = pack_sign(left_ints)
    elif case is BenchCase.CASE2:
        left_ints = rng.integers(0, 2, size=(m, k)).astype(np.int32)
        left = pack_bool(left_ints, 1.0)
    else:
        left_ints = random_ternary(m, k, seed)
        left = pack_ternary_ints(left_ints)
    right_ints = random_ternary(n, k, seed + 1)
    return left_ints, left, right_ints, pack_ternary_ints(right_ints)


def _check_kernel(case, seed, max_dim, max_k, cfg, mutate) -> Optional[Counterexample]:
    rng = np.random.default_rng(seed)
    m, n = (int(v) for v in rng.integers(1, max_dim + 1, size=2))
    k = int(rng.integers(1, max_k + 1))
    left_ints, left, right_ints, right = _operands(case, rng, m, n, k, seed)
    if mutate is not None:
        right = mutate(right)
    expected = gemm_int_oracle(left_ints, right_ints)
    got = run_kernel(case, left, right, cfg)
    if not np.array_equal(expected, got):
        index, want, have = _first_mismatch(expected, got)
        return Counterexample(case.value, seed, (m, n, k), index, want, have)

    extra = int(rng.integers(1, 3))
    padded = run_kernel(case, with_extra_padding(left, extra), with_extra_padding(right, extra), cfg)
    if not np.array_equal(expected, padded):
        index, want, have = _first_mismatch(expected, padded)
        return Counterexample(f"{case.value}-padding", seed, (m, n, k), index, want, have)
    return None


def _check_roundtrip(seed: int, max_k: int) -> Optional[Counterexample]:
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(1, 9))
    cols = int(rng.integers(1, max_k + 1))
    signs = random_signs(rows, cols, seed)
    ternary = random_ternary(rows, cols, seed + 1)
    bools = rng.integers(0, 2, size=(rows, cols)).astype(np.int32)
    for name, ints, packed in (
        ("roundtrip-sign", signs, pack_sign(signs)),
        ("roundtrip-ternary", ternary, pack_ternary_ints(ternary)),
        ("roundtrip-bool", bools, pack_bool(bools, 1.0)),
    ):
        if not padding_is_clear(packed):
            return Counterexample(f"{name}-padding", seed, (rows, cols))
        back = unpack(packed)
        if not np.array_equal(back, ints):
            index, want, have = _first_mismatch(ints, back)
            return Counterexample(name, seed, (rows, cols), index, want, have)
    return None


def check_case1_identity(seed: int, n_words: int = IDENTITY_WORDS) -> Optional[Counterexample]:
    """
    Check the Case 1 word identity against the elementwise dot product.

    On random sign words w (bit set = -1) and disjoint ternary planes a+, a-, both
    pc(a+) - pc(a-) - 2 pc(w & a+) + 2 pc(w & a-) and the kernel's pc(w ^ a+) - pc(w ^ a-)
    must equal sum(w * a) over the 64 unpacked elements of every word.
    """
    rng = np.random.default_rng(seed)
    w = rng.integers(0, 2**64, size=n_words, dtype=np.uint64)
    pos = rng.integers(0, 2**64, size=n_words, dtype=np.uint64)
    neg = rng.integers(0, 2**64, size=n_words, dtype=np.uint64) & ~pos

    def pc(words: np.ndarray) -> np.ndarray:
        return popcount_words(words).astype(np.int64)

    w_vals = 1 - 2 * unpack_bits(w[:, None], WORD_BITS).astype(np.int8)
    a_vals = unpack_bits(pos[:, None], WORD_BITS).astype(np.int8) - unpack_bits(neg[:, None], WORD_BITS).astype(np.int8)
    dot = (w_vals * a_vals).sum(axis=1, dtype=np.int64)

    forms = (
        ("case1-identity", pc(pos) - pc(neg) - 2 * pc(w & pos) + 2 * pc(w & neg)),
        ("case1-xor-form", pc(w ^ pos) - pc(w ^ neg)),
    )
    for name, got in forms:
        if not np.array_equal(dot, got):
            (i,), want, have = _first_mismatch(dot, got)
            return Counterexample(name, seed, (n_words,), (i,), want, have)
    return None


def run_verification(
    seed: int = 0,
    trials: int = 200,
    max_dim: int = 16,
    max_k: int = 257,
    cfg: Optional[KernelConfig] = None,
    mutate: Optional[Mutation] = None,
) -> VerifyResult:
    """Stop at the first counterexample; `mutate` corrupts the right operand of every kernel trial."""
    result = VerifyResult(trials=trials)
    if trials <= 0:
        logger.warning("verification ran zero trials; nothing was checked")
        return result

    for trial in range(trials):
        trial_seed = seed * 1_000_003 + trial
        for case in KERNEL_CASES:
            failure = _check_kernel(case, trial_seed, max_dim, max_k, cfg, mutate)
            if failure is not None:
                result.counterexample = failure
                logger.error("verification failed", detail=failure.describe())
                return result
            result.checks[case.value] = result.checks.get(case.value, 0) + 1
        failure = _check_roundtrip(trial_seed, max_k)
        if failure is not None:
            result.counterexample = failure
            logger.error("verification failed", detail=failure.describe())
            return result
        result.checks["roundtrip"] = result.checks.get("roundtrip", 0) + 1

    failure = check_case1_identity(seed)
    if failure is not None:
        result.counterexample = failure
        logger.error("verification failed", detail=failure.describe())
        return result
    result.checks["case1-identity"] = IDENTITY_WORDS
    logger.info("verification passed", trials=trials, checks=result.checks)
    return result
