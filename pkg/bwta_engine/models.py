"""
Data models for the BWTA engine.
Quantizer modes and states, packed matrices, kernel/bench configuration, schedules and reports.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .errors import CorruptPackError, DomainError, ScheduleError

WORD_BITS = 64
SCALE_FLOOR = 1e-6
MAX_REDUCTION_DIM = 2**24


def words_per_row(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


class QuantKind(Enum):
    """Quantizer families. Ternary is Levelwise with L=1."""
    SIGN_BINARY = "sign_binary"
    BOOL = "bool"
    LEVELWISE = "levelwise"


@dataclass(frozen=True)
class QuantMode:
    kind: QuantKind
    L: int = 1

    def __post_init__(self):
        if self.kind is QuantKind.LEVELWISE:
            if not isinstance(self.L, (int, np.integer)) or self.L < 1:
                raise DomainError(f"levelwise half-range must be a positive integer, got {self.L!r}")
            object.__setattr__(self, "L", int(self.L))
        else:
            object.__setattr__(self, "L", 1)

    @classmethod
    def sign_binary(cls) -> "QuantMode":
        return cls(QuantKind.SIGN_BINARY)

    @classmethod
    def bool_(cls) -> "QuantMode":
        return cls(QuantKind.BOOL)

    @classmethod
    def ternary(cls) -> "QuantMode":
        return cls(QuantKind.LEVELWISE, 1)

    @classmethod
    def levelwise(cls, L: int) -> "QuantMode":
        return cls(QuantKind.LEVELWISE, L)

    @property
    def is_ternary(self) -> bool:
        return self.kind is QuantKind.LEVELWISE and self.L == 1

    @property
    def is_levelwise(self) -> bool:
        return self.kind is QuantKind.LEVELWISE

    def bounds(self) -> Tuple[int, int]:
        """Clip range (lo, hi) of the integer grid."""
        if self.kind is QuantKind.BOOL:
            return 0, 1
        if self.kind is QuantKind.SIGN_BINARY:
            return -1, 1
        return -self.L, self.L

    def describe(self) -> str:
        if self.kind is QuantKind.LEVELWISE:
            return "ternary" if self.L == 1 else f"levelwise({self.L})"
        return self.kind.value


@dataclass(frozen=True)
class QuantState:
    """
    Live parameters of one quantizer.
    The scale is floored at SCALE_FLOOR on construction, so s > 0 always holds.
    """
    scale: float
    mode: QuantMode
    grad_scale: Optional[float] = None
    use_grad_scale: bool = True

    def __post_init__(self):
        scale = float(self.scale)
        if not math.isfinite(scale):
            raise DomainError(f"scale must be finite, got {self.scale!r}")
        object.__setattr__(self, "scale", max(scale, SCALE_FLOOR))

    def with_scale(self, scale: float) -> "QuantState":
        return QuantState(scale, self.mode, self.grad_scale, self.use_grad_scale)

    def grad_factor(self, n: int) -> float:
        """LSQ gradient normalizer g = 1/sqrt(n * hi)."""
        if not self.use_grad_scale:
            return 1.0
        if self.grad_scale is not None:
            return float(self.grad_scale)
        _, hi = self.mode.bounds()
        return 1.0 / math.sqrt(max(n, 1) * max(hi, 1))


class PackKind(Enum):
    """Packed encodings; values double as the .bwta kind byte."""
    SIGN_NEG_IS_ONE = 0
    BOOL_ONE_IS_ONE = 1
    TERNARY = 2


def _check_words(name: str, words: np.ndarray, rows: int, cols: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype=np.uint64)
    if words.ndim != 2 or words.shape[0] != rows or words.shape[1] < words_per_row(cols):
        raise CorruptPackError(
            f"{name}: word array of shape {words.shape} cannot hold {rows}x{cols} elements"
        )
    return words


@dataclass
class PackedBinaryMatrix:
    """
    One bit per element, LSB-first 64-bit words, one word row per matrix row.
    SIGN_NEG_IS_ONE: bit 1 is -1, bit 0 is +1. BOOL_ONE_IS_ONE: bit 1 is 1, bit 0 is 0.
    """
    rows: int
    cols: int
    kind: PackKind
    words: np.ndarray

    def __post_init__(self):
        if self.kind is PackKind.TERNARY:
            raise CorruptPackError("binary matrix cannot carry the ternary kind")
        self.words = _check_words("binary words", self.words, self.rows, self.cols)

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols


@dataclass
class PackedTernaryMatrix:
    """Two bit-planes over the same geometry: pos (value +1) and neg (value -1)."""
    rows: int
    cols: int
    pos: np.ndarray
    neg: np.ndarray
    kind: PackKind = field(default=PackKind.TERNARY, init=False)

    def __post_init__(self):
        self.pos = _check_words("positive plane", self.pos, self.rows, self.cols)
        self.neg = _check_words("negative plane", self.neg, self.rows, self.cols)
        if self.pos.shape != self.neg.shape:
            raise CorruptPackError(f"plane shapes differ: {self.pos.shape} vs {self.neg.shape}")

    @property
    def words_per_row(self) -> int:
        return self.pos.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rows, self.cols

    @classmethod
    def from_bool(cls, packed: PackedBinaryMatrix) -> "PackedTernaryMatrix":
        """Lift a boolean-packed matrix into ternary planes (empty negative plane)."""
        if packed.kind is not PackKind.BOOL_ONE_IS_ONE:
            raise CorruptPackError(f"expected a boolean-packed matrix, got {packed.kind.name}")
        return cls(packed.rows, packed.cols, packed.words.copy(), np.zeros_like(packed.words))


@dataclass(frozen=True)
class KernelConfig:
    """Micro-tile geometry and worker mode of the popcount kernels."""
    row_tile: int = 4
    col_tile: int = 4
    parallel: bool = False
    workers: Optional[int] = None

    def __post_init__(self):
        if self.row_tile < 1 or self.col_tile < 1:
            raise DomainError(f"tiles must be >= 1, got {self.row_tile}x{self.col_tile}")
        if self.workers is not None and self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class Stage:
    L: int
    epochs: int


@dataclass(frozen=True)
class Schedule:
    """Stage list with strictly decreasing L ending at ternary (L=1)."""
    stages: Tuple[Stage, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ScheduleError("schedule has no stages")
        for i, stage in enumerate(stages):
            if stage.L < 1:
                raise ScheduleError(f"stage {i}: L must be positive, got {stage.L}")
            if stage.epochs < 1:
                raise ScheduleError(f"stage {i}: needs at least one epoch, got {stage.epochs}")
            if i and stage.L >= stages[i - 1].L:
                raise ScheduleError(f"stage {i}: L={stage.L} does not decrease from {stages[i - 1].L}")
        if stages[-1].L != 1:
            raise ScheduleError(f"final stage must be ternary (L=1), got L={stages[-1].L}")

    @property
    def total_epochs(self) -> int:
        return sum(stage.epochs for stage in self.stages)

    @property
    def levels(self) -> List[int]:
        return [stage.L for stage in self.stages]

    @property
    def epochs(self) -> List[int]:
        return [stage.epochs for stage in self.stages]

    def boundaries(self) -> List[int]:
        """Epoch index (0-based) at which each stage starts."""
        starts, acc = [], 0
        for stage in self.stages:
            starts.append(acc)
            acc += stage.epochs
        return starts

    def to_dict(self) -> Dict[str, Any]:
        return {"levels": self.levels, "epochs": self.epochs, "total_epochs": self.total_epochs}


class BenchCase(Enum):
    FP32 = "fp32"
    CASE1 = "case1"
    CASE1_NAIVE_AND = "case1-naive-and"
    CASE2 = "case2"
    CASE3 = "case3"
    PACK_BINARY = "pack-binary"
    PACK_TERNARY = "pack-ternary"

    @property
    def is_pack(self) -> bool:
        return self in (BenchCase.PACK_BINARY, BenchCase.PACK_TERNARY)


@dataclass(frozen=True)
class BenchSpec:
    case: BenchCase
    m: int
    n: int
    k: int
    repeats: int = 50
    warmup: int = 5
    check: bool = True
    seed: int = 0
    parallel: bool = False

    def __post_init__(self):
        if isinstance(self.case, str):
            object.__setattr__(self, "case", BenchCase(self.case))
        if min(self.m, self.n, self.k) < 1:
            raise DomainError(f"bench shapes must be >= 1, got M={self.m} N={self.n} K={self.k}")
        if self.repeats < 1:
            raise DomainError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise DomainError(f"warmup must be >= 0, got {self.warmup}")

    @property
    def ops(self) -> int:
        """Counted operations: 2*M*N*K for GEMMs, M*K elements for packing."""
        if self.case.is_pack:
            return self.m * self.k
        return 2 * self.m * self.n * self.k


@dataclass
class BenchRow:
    case: str
    m: int
    n: int
    k: int
    median_us: float
    min_us: float
    max_us: float
    gops: float
    checksum: str
    check: Optional[bool]
    parallel: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "case": self.case,
            "M": self.m,
            "N": self.n,
            "K": self.k,
            "median_us": round(self.median_us, 3),
            "min_us": round(self.min_us, 3),
            "max_us": round(self.max_us, 3),
            "gops": round(self.gops, 4),
            "checksum": self.checksum,
            "check": {True: "pass", False: "FAIL", None: "skipped"}[self.check],
            "mode": "parallel" if self.parallel else "single",
        }


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)
    machine: Dict[str, Any] = field(default_factory=dict)


class ScaleTag(Enum):
    DIVERGING = "diverging"
    OSCILLATING = "oscillating"
    VANISHED_GRADIENT = "vanished-gradient"


@dataclass
class ScaleStatus:
    converged: bool
    max_delta: float
    final: float
    tag: Optional[ScaleTag] = None


@dataclass
class ConvergenceReport:
    fraction_non_converged: float
    scales: Dict[str, ScaleStatus] = field(default_factory=dict)

    def tags(self) -> Dict[str, Optional[ScaleTag]]:
        return {name: status.tag for name, status in self.scales.items()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fraction_non_converged": self.fraction_non_converged,
            "scales": {
                name: {
                    "converged": status.converged,
                    "max_delta": status.max_delta,
                    "final": status.final,
                    "tag": status.tag.value if status.tag else None,
                }
                for name, status in self.scales.items()
            },
        }


@dataclass
class EpochRecord:
    epoch: int
    stage_L: int
    loss: float
    acc: float
    zero_frac: float
    val_loss: float = float("nan")
    scales: Dict[str, float] = field(default_factory=dict)
    grads: Dict[str, float] = field(default_factory=dict)


class Strategy(Enum):
    """Scale re-initialization at stage transitions."""
    OURS = "ours"
    MEAN = "mean"
    NONE = "none"
    SEARCH_OFF = "search-off"


class ScheduleKind(Enum):
    LEVELWISE = "levelwise"
    BITWISE = "bitwise"


class LevelConvention(Enum):
    HALF_RANGE = "half_range"
    LEVEL_COUNT = "level_count"


@dataclass
class TrainConfig:
    """Hyper-parameters of a smooth multi-stage run; defaults follow the BERT recipe."""
    L0: int = 4
    stride: int = 1
    total_epochs: int = 30
    lr_scale: float = 1e-3
    lr_weight: float = 2e-5
    lr_fp: float = 1e-2
    weight_decay: float = 0.01
    warmup_epochs: int = 1
    fp_epochs: int = 0
    seed: int = 0
    strategy: Strategy = Strategy.OURS
    schedule: ScheduleKind = ScheduleKind.LEVELWISE
    stages: Optional[Tuple[int, ...]] = None
    level_convention: LevelConvention = LevelConvention.HALF_RANGE
    batch_size: int = 32
    n_samples: int = 2000
    seq_len: int = 8
    dim: int = 16
    d_in: int = 16
    heads: int = 2
    ffn_dim: int = 32
    n_classes: int = 2
    early_stop_patience: int = 0
    grad_scale: bool = True
    calib_size: int = 256
    metrics_csv: Optional[str] = None
    checkpoint_dir: Optional[str] = None
    parallel: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = {}
        for key, value in self.__dict__.items():
            if isinstance(value, Enum):
                data[key] = value.value
            elif isinstance(value, tuple):
                data[key] = list(value)
            else:
                data[key] = value
        return data
