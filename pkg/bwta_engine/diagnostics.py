"""
Training diagnostics: zero fraction of a quantized activation and the convergence
report over the recorded scale trajectories.
"""

import math
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import structlog

from .errors import DomainError
from .models import ConvergenceReport, EpochRecord, QuantMode, QuantState, ScaleStatus, ScaleTag
from .quant import quantize

logger = structlog.get_logger(__name__)

# recent |grad| below this share of the run's peak counts as vanished
VANISH_RATIO = 0.05


def zero_fraction(a, s: float, L: int = 1) -> float:
    """Share of entries that quantize to 0 on the Levelwise(L) grid."""
    if not s > 0:
        raise DomainError(f"scale must be positive, got {s}")
    q = quantize(a, QuantState(s, QuantMode.levelwise(L)))
    return float(np.count_nonzero(q == 0) / q.size)


def _history(source) -> List[EpochRecord]:
    return list(getattr(source, "history", source))


def _tag(deltas: np.ndarray, grads: Optional[np.ndarray], window: int) -> ScaleTag:
    if grads is not None and grads.size:
        peak = float(np.abs(grads).max())
        recent = grads[-window:]
        if peak > 0 and float(np.abs(recent).mean()) < VANISH_RATIO * peak:
            return ScaleTag.VANISHED_GRADIENT
        signs = np.sign(recent[recent != 0])
        if signs.size and (signs == signs[0]).all():
            return ScaleTag.DIVERGING
    moves = np.sign(deltas[deltas != 0])
    if moves.size and (moves == moves[0]).all():
        return ScaleTag.DIVERGING
    return ScaleTag.OSCILLATING


def convergence_report(
    source: Union[Sequence[EpochRecord], object],
    window_frac: float = 0.2,
    tol: float = 0.01,
) -> ConvergenceReport:
    """
    A scale is non-converged when max |delta s| over the last window_frac of the epochs
    exceeds tol * |s_final|. `source` is a TrainState or its history.
    """
    history = _history(source)
    if not history:
        raise DomainError("convergence report needs a non-empty history")
    if not 0 < window_frac <= 1:
        raise DomainError(f"window_frac must be in (0, 1], got {window_frac}")

    window = max(2, math.ceil(window_frac * len(history)))
    names = list(history[-1].scales)
    statuses: Dict[str, ScaleStatus] = {}
    for name in names:
        values = np.array([rec.scales[name] for rec in history if name in rec.scales], dtype=np.float64)
        final = float(values[-1])
        deltas = np.diff(values[-window:])
        max_delta = float(np.abs(deltas).max()) if deltas.size else 0.0
        converged = max_delta <= tol * abs(final)
        tag = None
        if not converged:
            grads = [rec.grads[name] for rec in history if name in rec.grads]
            tag = _tag(deltas, np.array(grads, dtype=np.float64) if grads else None, window - 1)
        statuses[name] = ScaleStatus(converged, max_delta, final, tag)

    fraction = sum(not st.converged for st in statuses.values()) / len(statuses) if statuses else 0.0
    report = ConvergenceReport(fraction, statuses)
    logger.debug("convergence report", fraction_non_converged=fraction, scales=len(statuses))
    return report
