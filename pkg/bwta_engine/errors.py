"""
Exception hierarchy for the BWTA engine.
Every error subclasses the builtin category callers already catch (ValueError, TypeError, ...).
"""

from typing import Optional, Sequence


class BwtaError(Exception):
    """Base class for all engine errors."""


class ShapeMismatchError(BwtaError, ValueError):
    def __init__(self, op: str, left: Sequence[int], right: Sequence[int], detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: shape mismatch {self.left} vs {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class DomainError(BwtaError, ValueError):
    """Value outside the domain an operation accepts."""


class CorruptPackError(BwtaError, ValueError):
    """Packed data or a .bwta file violates the packing invariants."""


class KindError(BwtaError, TypeError):
    """Packed matrix of the wrong kind handed to a kernel."""


class ScheduleError(BwtaError, ValueError):
    """Invalid stage schedule or transition."""


class ConfigError(BwtaError, ValueError):
    def __init__(self, message: str, line_number: Optional[int] = None, key: Optional[str] = None):
        self.line_number = line_number
        self.key = key
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class TrainingDivergedError(BwtaError, RuntimeError):
    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite ({loss}) at epoch {epoch}, step {step}")


class BenchSizeError(BwtaError, MemoryError):
    def __init__(self, estimate_bytes: int, limit_bytes: int, shape: Sequence[int]):
        self.estimate_bytes = estimate_bytes
        self.limit_bytes = limit_bytes
        super().__init__(
            f"shape {tuple(shape)} needs about {estimate_bytes / 2**30:.2f} GiB, "
            f"limit is {limit_bytes / 2**30:.2f} GiB"
        )
