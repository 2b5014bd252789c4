"""
Quantization-aware training modules (torch).

Activations go through LsqQuantize: round-half-away-from-zero on a clipped grid in the
forward pass, clipped STE for the input and the LSQ gradient for the scale in the backward
pass (the same formulas as quant.ste_backward). Weights are binarized around their mean
with the naive (identity) STE.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch import nn

from .layers import AttentionParams, BlockParams, BwtaLinear, ToyModel
from .models import SCALE_FLOOR, QuantKind, QuantMode, QuantState

logger = structlog.get_logger(__name__)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def lsq_terms(v: torch.Tensor, r: torch.Tensor, lo: float, hi: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """(inside-clip mask, d quantized / d scale) at v = x / s with integer code r."""
    inside = (v >= lo) & (v <= hi)
    d = torch.where(v < lo, torch.full_like(v, lo), torch.where(v > hi, torch.full_like(v, hi), r - v))
    return inside, d


@dataclass
class FrozenPoint:
    """Tangent of one quantizer at a captured (x, s): value, scale slope and clip mask."""

    value: torch.Tensor
    x: torch.Tensor
    scale: torch.Tensor
    slope: torch.Tensor
    inside: torch.Tensor

    def __call__(self, x: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
        return self.value + (scale - self.scale) * self.slope + self.inside * (x - self.x)


class LsqQuantize(torch.autograd.Function):
    """s * round(clip(x / s, lo, hi)) with clipped-STE / LSQ gradients."""

    @staticmethod
    def forward(ctx, x, scale, lo, hi, grad_factor):
        v = (x / scale).double()
        r = round_half_away(v.clamp(lo, hi))
        ctx.save_for_backward(v, r)
        ctx.lo, ctx.hi, ctx.grad_factor = lo, hi, grad_factor
        return r.to(x.dtype) * scale

    @staticmethod
    def backward(ctx, grad_out):
        v, r = ctx.saved_tensors
        inside, d = lsq_terms(v, r, ctx.lo, ctx.hi)
        grad_x = grad_out * inside.to(grad_out.dtype)
        grad_s = ctx.grad_factor * (grad_out.double() * d).sum()
        return grad_x, grad_s.to(grad_out.dtype).reshape(()), None, None, None


def binarize_weight(w: torch.Tensor) -> torch.Tensor:
    """s_W * sign(W - mu(W)) forward, identity gradient backward."""
    mu = w.mean()
    s_w = (torch.linalg.norm(w) / w.numel()).clamp(min=SCALE_FLOOR)
    w_q = torch.where(w - mu >= 0, 1.0, -1.0).to(w.dtype) * s_w
    return w + (w_q - w).detach()


class ActQuantizer(nn.Module):
    """
    Activation quantizer with a learnable layerwise scale.

    The scale initializes to 2 * mean|x| on the first quantized forward pass.
    """

    def __init__(self, mode: QuantMode, use_grad_scale: bool = True):
        super().__init__()
        if mode.kind is QuantKind.SIGN_BINARY:
            raise ValueError("activation quantizers are bool or levelwise")
        self.mode = mode
        self.use_grad_scale = use_grad_scale
        self.scale = nn.Parameter(torch.tensor(1.0))
        self.enabled = True
        self.initialized = False
        self.recording = False
        self.last_input: Optional[torch.Tensor] = None
        self.last_grad_factor = 1.0
        self._rounding = "live"
        self._frozen: Optional[FrozenPoint] = None

    def extra_repr(self) -> str:
        return f"mode={self.mode.describe()}, scale={self.scale.item():.4g}"

    @property
    def degradable(self) -> bool:
        """Follows the stage schedule (the ternary family); bool quantizers keep [0, 1]."""
        return self.mode.is_levelwise

    def state(self) -> QuantState:
        return QuantState(float(self.scale.detach()), self.mode, use_grad_scale=self.use_grad_scale)

    def set_level(self, L: int) -> None:
        if self.degradable:
            self.mode = QuantMode.levelwise(L)

    def set_scale(self, value: float) -> None:
        with torch.no_grad():
            self.scale.fill_(max(float(value), SCALE_FLOOR))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.recording:
            self.last_input = x.detach().clone()
        if not self.enabled:
            return x
        if not self.initialized:
            init = 2.0 * float(x.detach().abs().mean())
            if init > 0:
                self.set_scale(init)
            else:
                logger.warning("all-zero activation at scale init, keeping 1.0")
            self.initialized = True

        lo, hi = self.mode.bounds()
        if self._rounding == "capture":
            with torch.no_grad():
                v = (x / self.scale).double()
                r = round_half_away(v.clamp(lo, hi))
                inside, d = lsq_terms(v, r, lo, hi)
                scale = self.scale.detach().clone()
                self._frozen = FrozenPoint(
                    value=r.to(x.dtype) * scale,
                    x=x.detach().clone(),
                    scale=scale,
                    slope=d.to(x.dtype),
                    inside=inside.to(x.dtype),
                )
            self._rounding = "frozen"
        if self._rounding == "frozen":
            return self._frozen(x, self.scale)

        g = self.state().grad_factor(x.numel())
        self.last_grad_factor = g
        return LsqQuantize.apply(x, self.scale, float(lo), float(hi), g)


class QBwtaLinear(nn.Module):
    """Bias-free linear layer with binary weights and quantized input activations."""

    def __init__(self, in_features: int, out_features: int, act_mode: QuantMode, use_grad_scale: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        self.act_quant = ActQuantizer(act_mode, use_grad_scale)
        self.quantize_weight = True

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act_quant(x)
        w = binarize_weight(self.weight) if self.quantize_weight else self.weight
        return F.linear(x, w)


class QAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, use_grad_scale: bool = True):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        ternary = QuantMode.ternary()
        self.q_proj = QBwtaLinear(d_model, d_model, ternary, use_grad_scale)
        self.k_proj = QBwtaLinear(d_model, d_model, ternary, use_grad_scale)
        self.v_proj = QBwtaLinear(d_model, d_model, ternary, use_grad_scale)
        self.o_proj = QBwtaLinear(d_model, d_model, ternary, use_grad_scale)
        self.q_quant = ActQuantizer(ternary, use_grad_scale)
        self.k_quant = ActQuantizer(ternary, use_grad_scale)
        self.v_quant = ActQuantizer(ternary, use_grad_scale)
        self.att_quant = ActQuantizer(QuantMode.bool_(), use_grad_scale)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # quantized after projection, before the head split
        q = self._split(self.q_quant(self.q_proj(x)))
        k = self._split(self.k_quant(self.k_proj(x)))
        v = self._split(self.v_quant(self.v_proj(x)))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = self.att_quant(torch.softmax(scores, dim=-1))
        context = (probs @ v).transpose(1, 2).reshape(x.shape)
        return self.o_proj(context)


class GateReLU(nn.Module):
    """ReLU whose gate can be frozen for the gradient check."""

    def __init__(self):
        super().__init__()
        self._gating = "live"
        self._mask: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self._gating == "capture":
            self._mask = (x > 0).to(x.dtype).detach()
            self._gating = "frozen"
        if self._gating == "frozen":
            return x * self._mask
        return torch.relu(x)


class QTransformerBlock(nn.Module):
    def __init__(self, d_model: int, heads: int, ffn_dim: int, use_grad_scale: bool = True):
        super().__init__()
        self.attn = QAttention(d_model, heads, use_grad_scale)
        self.ln1 = nn.LayerNorm(d_model)
        self.ffn1 = QBwtaLinear(d_model, ffn_dim, QuantMode.ternary(), use_grad_scale)
        self.ffn2 = QBwtaLinear(ffn_dim, d_model, QuantMode.bool_(), use_grad_scale)
        self.act = GateReLU()
        self.ln2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x + self.attn(x))
        return self.ln2(h + self.ffn2(self.act(self.ffn1(h))))


class ToyClassifier(nn.Module):
    """Full-precision first and last layers around one BWTA block."""

    def __init__(self, d_in: int, d_model: int, heads: int, ffn_dim: int, n_classes: int, use_grad_scale: bool = True):
        super().__init__()
        self.embed = nn.Linear(d_in, d_model)
        self.block = QTransformerBlock(d_model, heads, ffn_dim, use_grad_scale)
        self.head = nn.Linear(d_model, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.block(self.embed(x)).mean(dim=1))


def act_quantizers(model: nn.Module) -> Dict[str, ActQuantizer]:
    return {name: module for name, module in model.named_modules() if isinstance(module, ActQuantizer)}


def scale_parameters(model: nn.Module) -> List[nn.Parameter]:
    return [q.scale for q in act_quantizers(model).values()]


def set_quantization(model: nn.Module, enabled: bool) -> None:
    for module in model.modules():
        if isinstance(module, ActQuantizer):
            module.enabled = enabled
        elif isinstance(module, QBwtaLinear):
            module.quantize_weight = enabled


def set_level(model: nn.Module, L: int) -> None:
    for quantizer in act_quantizers(model).values():
        quantizer.set_level(L)


@contextmanager
def record_inputs(model: nn.Module) -> Iterator[Dict[str, ActQuantizer]]:
    quantizers = act_quantizers(model)
    for q in quantizers.values():
        q.recording = True
    try:
        yield quantizers
    finally:
        for q in quantizers.values():
            q.recording = False


@contextmanager
def frozen_rounding(model: nn.Module) -> Iterator[None]:
    """
    Linearize every quantizer and ReLU gate at the point seen on the next forward pass.

    Inside the block each quantizer returns its captured value plus (s - s0) * dq/ds plus
    the clipped-STE mask times (x - x0), and each ReLU multiplies by its captured mask. At
    the captured point the values are bit-identical to the live forward, and the
    derivatives are exactly the LSQ and STE ones. No rounding step, clip edge or ReLU
    kink moves with s, so central differences see a smooth function. Integer dot
    products often cancel to exactly zero, which puts live kinks on the probe point.
    """
    quantizers = act_quantizers(model).values()
    gates = [m for m in model.modules() if isinstance(m, GateReLU)]
    for q in quantizers:
        q._rounding = "capture"
    for gate in gates:
        gate._gating = "capture"
    try:
        yield
    finally:
        for q in quantizers:
            q._rounding = "live"
            q._frozen = None
        for gate in gates:
            gate._gating = "live"
            gate._mask = None


def _export_linear(layer: QBwtaLinear) -> BwtaLinear:
    weight = layer.weight.detach().cpu().float().numpy()
    return BwtaLinear.from_weight(weight, layer.act_quant.state())


def export_block(block: QTransformerBlock) -> BlockParams:
    """Snapshot a trained block into packed numpy layers."""
    attn = block.attn
    params = AttentionParams(
        s_q=attn.q_quant.state(),
        s_k=attn.k_quant.state(),
        s_att=attn.att_quant.state(),
        s_v=attn.v_quant.state(),
        heads=attn.heads,
        d_model=attn.d_model,
    )

    def np_param(p: torch.Tensor) -> np.ndarray:
        return p.detach().cpu().float().numpy().copy()

    return BlockParams(
        q_proj=_export_linear(attn.q_proj),
        k_proj=_export_linear(attn.k_proj),
        v_proj=_export_linear(attn.v_proj),
        o_proj=_export_linear(attn.o_proj),
        ffn1=_export_linear(block.ffn1),
        ffn2=_export_linear(block.ffn2),
        attention=params,
        ln1_gamma=np_param(block.ln1.weight),
        ln1_beta=np_param(block.ln1.bias),
        ln2_gamma=np_param(block.ln2.weight),
        ln2_beta=np_param(block.ln2.bias),
        eps=block.ln1.eps,
    )


def export_model(model: ToyClassifier, stage_L: int = 1) -> ToyModel:
    def np_param(p: torch.Tensor) -> np.ndarray:
        return p.detach().cpu().float().numpy().copy()

    return ToyModel(
        embed_w=np_param(model.embed.weight),
        embed_b=np_param(model.embed.bias),
        block=export_block(model.block),
        head_w=np_param(model.head.weight),
        head_b=np_param(model.head.bias),
        stage_L=stage_L,
    )


def scale_snapshot(model: nn.Module) -> Dict[str, float]:
    return {name: float(q.scale.detach()) for name, q in act_quantizers(model).items()}


def calibration_inputs(model: nn.Module, batch: torch.Tensor) -> Dict[str, np.ndarray]:
    """Inputs seen by every quantizer on one batch, flattened to 2-D float32 matrices."""
    with torch.no_grad(), record_inputs(model) as quantizers:
        model(batch)
    out: Dict[str, np.ndarray] = {}
    for name, q in quantizers.items():
        if q.last_input is None:
            continue
        x = q.last_input.cpu().float().numpy()
        out[name] = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        q.last_input = None
    return out


def param_groups(model: nn.Module) -> Tuple[List[nn.Parameter], List[nn.Parameter]]:
    """(scales, everything else)."""
    scale_ids = {id(p) for p in scale_parameters(model)}
    scales = [p for p in model.parameters() if id(p) in scale_ids]
    weights = [p for p in model.parameters() if id(p) not in scale_ids]
    return scales, weights
