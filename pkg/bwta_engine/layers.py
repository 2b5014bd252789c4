"""
BWTA layers on the packed CPU path: the linear layer, the two attention MatMuls,
a transformer block with full-precision nonlinearities and a toy classifier around it.

Kernel outputs are raw integers; every layer multiplies them by the product of its
scales, so the packed path and the dequantized integer-oracle path agree exactly.
"""

import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
import structlog

from .bitpack import pack_bool, pack_sign, pack_ternary, unpack
from .errors import DomainError, ShapeMismatchError
from .kernels import gemm_case1, gemm_case2, gemm_case3
from .models import KernelConfig, PackKind, PackedBinaryMatrix, PackedTernaryMatrix, QuantKind, QuantMode, QuantState
from .quant import quantize, weight_sign_quantize
from .tensor import as_dense, gemm_int_oracle

logger = structlog.get_logger(__name__)

ScaleLike = Union[float, QuantState]


def _as_state(scale: ScaleLike, mode: QuantMode) -> QuantState:
    if isinstance(scale, QuantState):
        return scale
    if not scale > 0:
        raise DomainError(f"scale must be positive, got {scale}")
    return QuantState(float(scale), mode)


def _scale_product(*factors: float) -> np.float32:
    return np.float32(math.prod(factors))


@dataclass
class BwtaLinear:
    """
    Binary-weight linear layer. The packed weight, s_W and mu are derived from the
    latent weight and refreshed with `refresh()` after every weight update.
    """
    act_state: QuantState
    weight: Optional[np.ndarray] = None
    packed: Optional[PackedBinaryMatrix] = None
    s_w: float = 0.0
    mu: float = 0.0

    def __post_init__(self):
        if self.act_state.mode.kind is QuantKind.SIGN_BINARY:
            raise DomainError("activations cannot use the sign-binary quantizer")
        if self.weight is not None:
            self.refresh()
        elif self.packed is None:
            raise DomainError("BwtaLinear needs a latent weight or a packed weight")
        elif self.packed.kind is not PackKind.SIGN_NEG_IS_ONE:
            raise DomainError(f"packed weight must be sign-packed, got {self.packed.kind.name}")

    @classmethod
    def from_weight(cls, weight, act_state: QuantState) -> "BwtaLinear":
        return cls(act_state=act_state, weight=as_dense(weight, "W"))

    @classmethod
    def from_packed(cls, packed: PackedBinaryMatrix, s_w: float, act_state: QuantState, mu: float = 0.0) -> "BwtaLinear":
        return cls(act_state=act_state, packed=packed, s_w=s_w, mu=mu)

    def refresh(self) -> None:
        signs, self.s_w, self.mu = weight_sign_quantize(self.weight)
        self.packed = pack_sign(signs)

    @property
    def out_features(self) -> int:
        return self.packed.rows

    @property
    def in_features(self) -> int:
        return self.packed.cols

    def dense_weight(self) -> np.ndarray:
        """Latent weight when present, otherwise s_W * sign(W - mu) unpacked."""
        if self.weight is not None:
            return self.weight
        return np.float32(self.s_w) * unpack(self.packed).astype(np.float32)

    def forward(self, a, quantized: bool = True, cfg: Optional[KernelConfig] = None) -> np.ndarray:
        return bwta_linear_forward(self, a, quantized=quantized, cfg=cfg)


def bwta_linear_forward(layer: BwtaLinear, a, quantized: bool = True, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """s_W * s_A * BWTA(sign(W - mu), A / s_A) as an [N x out] matrix."""
    a = as_dense(a, "A")
    if a.shape[1] != layer.in_features:
        raise ShapeMismatchError("bwta_linear_forward", a.shape, (layer.out_features, layer.in_features))

    if not quantized:
        return a @ layer.dense_weight().T

    state = layer.act_state
    mode = state.mode
    if mode.kind is QuantKind.BOOL:
        ints = gemm_case1(layer.packed, PackedTernaryMatrix.from_bool(pack_bool(a, state.scale)), cfg)
    elif mode.is_ternary:
        ints = gemm_case1(layer.packed, pack_ternary(a, state.scale), cfg)
    else:
        # wider grids have no packed form; stay exact on the integer path
        ints = gemm_int_oracle(unpack(layer.packed), quantize(a, state))
    return _scale_product(layer.s_w, state.scale) * ints.T.astype(np.float32)


def attention_scores(q, k, s_q: ScaleLike, s_k: ScaleLike, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """(s_Q * s_K / sqrt(D)) * ternary(Q) x ternary(K)^T."""
    q = as_dense(q, "Q")
    k = as_dense(k, "K")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatchError("attention_scores", q.shape, k.shape)
    sq = _as_state(s_q, QuantMode.ternary())
    sk = _as_state(s_k, QuantMode.ternary())
    if sq.mode.is_ternary and sk.mode.is_ternary:
        ints = gemm_case3(pack_ternary(q, sq.scale), pack_ternary(k, sk.scale), cfg)
    else:
        ints = gemm_int_oracle(quantize(q, sq), quantize(k, sk))
    return _scale_product(sq.scale, sk.scale, 1.0 / math.sqrt(q.shape[1])) * ints.astype(np.float32)


def attention_context(att, v, s_att: ScaleLike, s_v: ScaleLike, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """s_Att * s_V * bool(Att) x ternary(V); V is [T x D], the reduction runs over T."""
    att = as_dense(att, "Att")
    v = as_dense(v, "V")
    if att.shape[1] != v.shape[0]:
        raise ShapeMismatchError("attention_context", att.shape, v.shape)
    if (att < 0).any():
        raise DomainError("attention probabilities must be non-negative")
    sa = _as_state(s_att, QuantMode.bool_())
    sv = _as_state(s_v, QuantMode.ternary())
    v_t = np.ascontiguousarray(v.T)
    if sv.mode.is_ternary:
        ints = gemm_case2(pack_bool(att, sa.scale), pack_ternary(v_t, sv.scale), cfg)
    else:
        ints = gemm_int_oracle(quantize(att, sa), quantize(v_t, sv))
    return _scale_product(sa.scale, sv.scale) * ints.astype(np.float32)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return ((x - mean) / np.sqrt(var + eps) * gamma + beta).astype(np.float32)


@dataclass
class AttentionParams:
    """Layerwise attention scales (shared by all heads)."""
    s_q: QuantState
    s_k: QuantState
    s_att: QuantState
    s_v: QuantState
    heads: int
    d_model: int

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise DomainError(f"d_model={self.d_model} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads


@dataclass
class BlockParams:
    q_proj: BwtaLinear
    k_proj: BwtaLinear
    v_proj: BwtaLinear
    o_proj: BwtaLinear
    ffn1: BwtaLinear
    ffn2: BwtaLinear
    attention: AttentionParams
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    eps: float = 1e-5

    def linears(self) -> dict:
        return {
            "q_proj": self.q_proj,
            "k_proj": self.k_proj,
            "v_proj": self.v_proj,
            "o_proj": self.o_proj,
            "ffn1": self.ffn1,
            "ffn2": self.ffn2,
        }


def transformer_block_forward(x, params: BlockParams, quantized: bool = True, cfg: Optional[KernelConfig] = None) -> np.ndarray:
    """Post-LN block: MHA + residual + LayerNorm, ReLU FFN + residual + LayerNorm."""
    x = as_dense(x, "x")
    attn = params.attention
    if x.shape[1] != attn.d_model:
        raise ShapeMismatchError("transformer_block_forward", x.shape, (x.shape[0], attn.d_model))

    q = params.q_proj.forward(x, quantized, cfg)
    k = params.k_proj.forward(x, quantized, cfg)
    v = params.v_proj.forward(x, quantized, cfg)

    d = attn.head_dim
    heads: List[np.ndarray] = []
    for h in range(attn.heads):
        cols = slice(h * d, (h + 1) * d)
        if quantized:
            scores = attention_scores(q[:, cols], k[:, cols], attn.s_q, attn.s_k, cfg)
            probs = softmax_rows(scores)
            heads.append(attention_context(probs, v[:, cols], attn.s_att, attn.s_v, cfg))
        else:
            scores = (q[:, cols] @ k[:, cols].T) / np.float32(math.sqrt(d))
            heads.append(softmax_rows(scores) @ v[:, cols])
    context = np.concatenate(heads, axis=1)

    h1 = layer_norm(x + params.o_proj.forward(context, quantized, cfg), params.ln1_gamma, params.ln1_beta, params.eps)
    ff = np.maximum(params.ffn1.forward(h1, quantized, cfg), 0.0)
    return layer_norm(h1 + params.ffn2.forward(ff, quantized, cfg), params.ln2_gamma, params.ln2_beta, params.eps)


@dataclass
class ToyModel:
    """Full-precision embed and head around one BWTA block; mean-pooled classifier."""
    embed_w: np.ndarray
    embed_b: np.ndarray
    block: BlockParams
    head_w: np.ndarray
    head_b: np.ndarray
    stage_L: int = 1
    cfg: KernelConfig = field(default_factory=KernelConfig)

    @property
    def d_in(self) -> int:
        return self.embed_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    def forward(self, x, quantized: bool = True) -> np.ndarray:
        """Logits for one sequence [T x d_in]."""
        x = as_dense(x, "x")
        if x.shape[1] != self.d_in:
            raise ShapeMismatchError("ToyModel.forward", x.shape, (x.shape[0], self.d_in))
        hidden = x @ self.embed_w.T + self.embed_b
        hidden = transformer_block_forward(hidden, self.block, quantized, self.cfg)
        return (hidden.mean(axis=0) @ self.head_w.T + self.head_b).astype(np.float32)

    def forward_batch(self, xs, quantized: bool = True) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float32)
        if xs.ndim != 3:
            raise DomainError(f"batch must be [B x T x d_in], got {xs.ndim}-D")
        return np.stack([self.forward(x, quantized) for x in xs])
