"""
Quantization functions: weight sign binarization, activation round-clip grids,
scale initialization and the LSQ straight-through gradients.
"""

from typing import Tuple

import numpy as np
import structlog

from .errors import DomainError, ShapeMismatchError
from .models import SCALE_FLOOR, QuantKind, QuantMode, QuantState
from .tensor import as_dense, as_int

logger = structlog.get_logger(__name__)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scaled(a: np.ndarray, scale: float) -> np.ndarray:
    """a / s in float32; quantize and the packers both threshold this value."""
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    return np.asarray(a, dtype=np.float32) / np.float32(scale)


def weight_sign_quantize(w) -> Tuple[np.ndarray, float, float]:
    """
    Binarize a weight matrix around its mean.

    Returns (signs, s_W, mu): signs = +1 where W - mu >= 0 else -1,
    s_W = ||W||_F / n_W floored at SCALE_FLOOR (an all-zero W would give 0), mu = mean(W).
    """
    w = as_dense(w, "W")
    mu = np.float32(w.mean(dtype=np.float64))
    signs = np.where(w - mu >= 0, 1, -1).astype(np.int32)
    s_w = max(float(np.linalg.norm(w.astype(np.float64)) / w.size), SCALE_FLOOR)
    return signs, s_w, float(mu)


def activation_scale_init(a) -> float:
    """s_A^0 = (2 / n_A) * ||A||_1, i.e. twice the mean magnitude."""
    a = as_dense(a, "A")
    scale = 2.0 * float(np.abs(a).mean(dtype=np.float64))
    if scale == 0.0:
        raise DomainError("activation is all zero; its scale would be 0")
    return scale


def quantize(a, state: QuantState) -> np.ndarray:
    a = as_dense(a, "A")
    mode = state.mode
    if mode.kind is QuantKind.SIGN_BINARY:
        return np.where(a >= 0, 1, -1).astype(np.int32)
    lo, hi = mode.bounds()
    v = scaled(a, state.scale)
    return round_half_away(np.clip(v, lo, hi)).astype(np.int32)


def check_range(q: np.ndarray, mode: QuantMode) -> None:
    if mode.kind is QuantKind.SIGN_BINARY:
        ok = np.isin(q, (-1, 1)).all()
    else:
        lo, hi = mode.bounds()
        ok = bool(((q >= lo) & (q <= hi)).all())
    if not ok:
        raise DomainError(f"integer matrix has entries outside the {mode.describe()} range")


def dequantize(q, state: QuantState) -> np.ndarray:
    q = as_int(q, "q")
    check_range(q, state.mode)
    return np.float32(state.scale) * q.astype(np.float32)


def ste_backward(a, state: QuantState, upstream) -> Tuple[np.ndarray, float]:
    """
    Clipped-STE input gradient and LSQ scale gradient.

    gradA passes upstream where lo <= A/s <= hi and is zero elsewhere.
    gradS = g * sum(upstream * d) with d = round(v) - v inside the range, lo below, hi above.
    Sign-binary weights use the naive STE: identity gradient, no scale gradient.
    """
    a = as_dense(a, "A")
    upstream = as_dense(upstream, "upstream")
    if a.shape != upstream.shape:
        raise ShapeMismatchError("ste_backward", a.shape, upstream.shape)
    if state.mode.kind is QuantKind.SIGN_BINARY:
        return upstream.copy(), 0.0

    lo, hi = state.mode.bounds()
    v = scaled(a, state.scale).astype(np.float64)
    r = round_half_away(np.clip(v, lo, hi))
    inside = (v >= lo) & (v <= hi)
    grad_a = np.where(inside, upstream, np.float32(0.0)).astype(np.float32)
    d = np.where(v < lo, float(lo), np.where(v > hi, float(hi), r - v))
    g = state.grad_factor(a.size)
    grad_s = g * float(np.sum(upstream.astype(np.float64) * d))
    return grad_a, grad_s
