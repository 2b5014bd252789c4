"""
Unit tests for the packed inference layers and the torch-to-numpy export.
"""

import math

import numpy as np
import pytest
import torch

from bwta_engine import qat
from bwta_engine.bitpack import unpack
from bwta_engine.errors import DomainError, ShapeMismatchError
from bwta_engine.layers import (
    AttentionParams,
    BlockParams,
    BwtaLinear,
    attention_context,
    attention_scores,
    layer_norm,
    softmax_rows,
    transformer_block_forward,
)
from bwta_engine.models import QuantMode, QuantState
from bwta_engine.quant import quantize
from bwta_engine.tensor import Distribution, gemm_int_oracle, random_matrix


def _state(scale, mode=None):
    return QuantState(scale, mode or QuantMode.ternary())


def _block(d_model=16, heads=2, ffn_dim=32, seed=0, scale=0.6):
    def weight(rows, cols, offset):
        return random_matrix(rows, cols, Distribution.normal(0, 0.3), seed + offset)

    def linear(rows, cols, offset, mode=None):
        return BwtaLinear.from_weight(weight(rows, cols, offset), _state(scale, mode))

    attention = AttentionParams(
        s_q=_state(0.8), s_k=_state(0.8), s_att=_state(0.3, QuantMode.bool_()), s_v=_state(0.8),
        heads=heads, d_model=d_model,
    )
    return BlockParams(
        q_proj=linear(d_model, d_model, 1), k_proj=linear(d_model, d_model, 2),
        v_proj=linear(d_model, d_model, 3), o_proj=linear(d_model, d_model, 4),
        ffn1=linear(ffn_dim, d_model, 5), ffn2=linear(d_model, ffn_dim, 6, QuantMode.bool_()),
        attention=attention,
        ln1_gamma=np.ones(d_model, np.float32), ln1_beta=np.zeros(d_model, np.float32),
        ln2_gamma=np.ones(d_model, np.float32), ln2_beta=np.zeros(d_model, np.float32),
    )


class TestBwtaLinear:
    def test_hand_example(self):
        """W [[1,-1]], A [[1,-1]] with s_A=2 gives 2 sqrt(2)."""
        layer = BwtaLinear.from_weight([[1.0, -1.0]], _state(2.0))
        assert layer.s_w == pytest.approx(math.sqrt(2) / 2)
        out = layer.forward([[1.0, -1.0]])
        assert out.shape == (1, 1)
        assert float(out[0, 0]) == pytest.approx(2 * math.sqrt(2), rel=1e-6)

    def test_dead_zone(self):
        """Activations inside (-s/2, s/2) give zero output."""
        layer = BwtaLinear.from_weight(random_matrix(4, 6, Distribution.normal(), 0), _state(2.0))
        assert not layer.forward(np.full((3, 6), 0.9)).any()

    def test_packed_equals_oracle(self):
        """The popcount path equals s_W * s_A * oracle(signs, ints) exactly."""
        w = random_matrix(12, 130, Distribution.normal(), 1)
        a = random_matrix(5, 130, Distribution.normal(), 2)
        state = _state(0.7)
        layer = BwtaLinear.from_weight(w, state)
        ints = gemm_int_oracle(unpack(layer.packed), quantize(a, state))
        expected = np.float32(layer.s_w * state.scale) * ints.T.astype(np.float32)
        assert np.array_equal(layer.forward(a), expected)

    def test_bool_input(self):
        """Bool activations go through the lifted Case 1 path."""
        w = random_matrix(3, 10, Distribution.normal(), 3)
        a = np.abs(random_matrix(4, 10, Distribution.normal(), 4))
        state = _state(0.5, QuantMode.bool_())
        layer = BwtaLinear.from_weight(w, state)
        ints = gemm_int_oracle(unpack(layer.packed), quantize(a, state))
        assert np.array_equal(layer.forward(a), np.float32(layer.s_w * 0.5) * ints.T.astype(np.float32))

    def test_levelwise_input(self):
        """L > 1 activations stay exact on the integer path."""
        w = random_matrix(3, 10, Distribution.normal(), 5)
        a = random_matrix(4, 10, Distribution.normal(), 6)
        state = _state(0.4, QuantMode.levelwise(3))
        layer = BwtaLinear.from_weight(w, state)
        ints = gemm_int_oracle(unpack(layer.packed), quantize(a, state))
        assert np.array_equal(layer.forward(a), np.float32(layer.s_w * 0.4) * ints.T.astype(np.float32))

    def test_dense_weight_without_latent(self):
        """A packed-only layer reconstructs s_W * sign for the fp path."""
        trained = BwtaLinear.from_weight(random_matrix(3, 5, Distribution.normal(), 7), _state(1.0))
        packed_only = BwtaLinear.from_packed(trained.packed, trained.s_w, _state(1.0), trained.mu)
        expected = np.float32(trained.s_w) * unpack(trained.packed).astype(np.float32)
        assert np.array_equal(packed_only.dense_weight(), expected)
        assert packed_only.forward(np.ones((2, 5)), quantized=False).shape == (2, 3)

    def test_shape_mismatch(self):
        """Input width must equal in_features."""
        layer = BwtaLinear.from_weight(np.ones((2, 4)), _state(1.0))
        with pytest.raises(ShapeMismatchError):
            layer.forward(np.ones((1, 5)))

    def test_sign_binary_activations_rejected(self):
        """Activations are bool or levelwise."""
        with pytest.raises(DomainError):
            BwtaLinear.from_weight(np.ones((2, 2)), QuantState(1.0, QuantMode.sign_binary()))


class TestAttention:
    def test_scores_diagonal(self):
        """Q == K above threshold: diagonal is s_Q s_K / sqrt(D) * D."""
        q = np.full((3, 4), 0.7, dtype=np.float32)
        scores = attention_scores(q, q, 1.0, 1.0)
        assert np.allclose(np.diag(scores), 4 / math.sqrt(4))

    def test_scores_dead_zone(self):
        """Queries in the dead zone give zero scores."""
        q = np.full((2, 4), 0.1, dtype=np.float32)
        k = random_matrix(3, 4, Distribution.normal(), 0)
        assert not attention_scores(q, k, 1.0, 1.0).any()

    def test_context_selects_row(self):
        """One-hot attention picks s_Att * s_V * tern(V row)."""
        v = random_matrix(4, 6, Distribution.normal(), 1)
        att = np.zeros((4, 4), dtype=np.float32)
        att[np.arange(4), [2, 0, 3, 1]] = 1.0
        out = attention_context(att, v, 0.5, 0.8)
        ternary_v = quantize(v, _state(0.8))
        expected = np.float32(0.5 * 0.8) * ternary_v[[2, 0, 3, 1]].astype(np.float32)
        assert np.array_equal(out, expected)

    def test_context_below_threshold(self):
        """Attention below s_Att / 2 gives a zero context."""
        v = random_matrix(4, 6, Distribution.normal(), 2)
        att = np.full((4, 4), 0.25, dtype=np.float32)
        assert not attention_context(att, v, 1.0, 0.8).any()

    def test_scores_fuzz_equals_oracle(self):
        """Packed Case 3 scores equal the dense integer path exactly on 100 random shapes."""
        rng = np.random.default_rng(7)
        for i in range(100):
            t, d = int(rng.integers(1, 20)), int(rng.integers(1, 150))
            q = random_matrix(t, d, Distribution.normal(), seed=i)
            k = random_matrix(t, d, Distribution.normal(0, 2), seed=i + 500)
            s_q, s_k = float(rng.uniform(0.2, 2.0)), float(rng.uniform(0.2, 4.0))
            ints = gemm_int_oracle(quantize(q, _state(s_q)), quantize(k, _state(s_k)))
            expected = np.float32(math.prod((s_q, s_k, 1.0 / math.sqrt(d)))) * ints.astype(np.float32)
            assert np.array_equal(attention_scores(q, k, s_q, s_k), expected), (t, d)

    def test_context_fuzz_equals_oracle(self):
        """Packed Case 2 context equals the dense integer path exactly on 100 random shapes."""
        rng = np.random.default_rng(8)
        for i in range(100):
            t, d = int(rng.integers(1, 80)), int(rng.integers(1, 20))
            att = softmax_rows(random_matrix(t, t, Distribution.normal(0, 3), seed=i))
            v = random_matrix(t, d, Distribution.normal(), seed=i + 500)
            s_att, s_v = float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.2, 2.0))
            ints = gemm_int_oracle(quantize(att, _state(s_att, QuantMode.bool_())), quantize(v.T, _state(s_v)))
            expected = np.float32(s_att * s_v) * ints.astype(np.float32)
            assert np.array_equal(attention_context(att, v, s_att, s_v), expected), (t, d)

    def test_scores_argmax_survives_rescaling(self):
        """Scaling Q, K and their scales by positive powers of two keeps every row's argmax."""
        q = random_matrix(12, 40, Distribution.normal(), seed=11)
        k = random_matrix(12, 40, Distribution.normal(), seed=12)
        base = attention_scores(q, k, 0.7, 0.9)
        for c_q, c_k in ((2.0, 0.5), (0.25, 8.0), (4.0, 4.0)):
            scaled = attention_scores(c_q * q, c_k * k, c_q * 0.7, c_k * 0.9)
            assert np.array_equal(scaled.argmax(axis=1), base.argmax(axis=1))
            assert np.allclose(scaled, c_q * c_k * base)

    def test_negative_attention(self):
        """Probabilities cannot be negative."""
        with pytest.raises(DomainError):
            attention_context(-np.ones((2, 2)), np.ones((2, 3)), 1.0, 1.0)


class TestBlock:
    def test_shapes(self):
        """Output shape equals input shape."""
        for t, d in ((8, 16), (4, 32)):
            params = _block(d_model=d, heads=2, ffn_dim=2 * d)
            x = random_matrix(t, d, Distribution.normal(), 9)
            assert transformer_block_forward(x, params).shape == (t, d)

    def test_softmax_and_layer_norm(self):
        """Softmax rows sum to 1; LayerNorm rows have zero mean and unit variance."""
        x = random_matrix(5, 16, Distribution.normal(0, 3), 10)
        assert np.allclose(softmax_rows(x).sum(axis=1), 1.0, atol=1e-6)
        y = layer_norm(x, np.ones(16, np.float32), np.zeros(16, np.float32))
        assert np.abs(y.mean(axis=1)).max() < 1e-5
        assert np.abs(y.var(axis=1) - 1).max() < 1e-3

    def test_heads_must_divide(self):
        """d_model must be divisible by the head count."""
        with pytest.raises(DomainError):
            AttentionParams(_state(1), _state(1), _state(1, QuantMode.bool_()), _state(1), heads=3, d_model=16)

    def test_unquantized_matches_reference(self):
        """With quantizers bypassed the block is a plain post-LN transformer."""
        params = _block()
        x = random_matrix(6, 16, Distribution.normal(), 11)
        x64 = x.astype(np.float64)

        def lin(layer, a):
            return a @ layer.weight.astype(np.float64).T

        d = 8
        heads = []
        q, k, v = lin(params.q_proj, x64), lin(params.k_proj, x64), lin(params.v_proj, x64)
        for h in range(2):
            cols = slice(h * d, (h + 1) * d)
            scores = q[:, cols] @ k[:, cols].T / math.sqrt(d)
            probs = np.exp(scores - scores.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            heads.append(probs @ v[:, cols])
        h1 = x64 + lin(params.o_proj, np.concatenate(heads, axis=1))
        h1 = (h1 - h1.mean(axis=1, keepdims=True)) / np.sqrt(h1.var(axis=1, keepdims=True) + 1e-5)
        h2 = h1 + lin(params.ffn2, np.maximum(lin(params.ffn1, h1), 0))
        expected = (h2 - h2.mean(axis=1, keepdims=True)) / np.sqrt(h2.var(axis=1, keepdims=True) + 1e-5)

        out = transformer_block_forward(x, params, quantized=False)
        assert np.allclose(out, expected, atol=1e-5)


class TestTorchExport:
    def setup_method(self):
        torch.manual_seed(0)
        self.model = qat.ToyClassifier(d_in=8, d_model=8, heads=2, ffn_dim=16, n_classes=2)
        self.x = torch.randn(3, 4, 8)
        # first quantized pass initializes every scale
        self.model.eval()
        with torch.no_grad():
            self.logits = self.model(self.x).numpy()

    def test_export_matches_torch(self):
        """The packed numpy model reproduces the torch forward pass."""
        exported = qat.export_model(self.model, stage_L=1)
        out = exported.forward_batch(self.x.numpy())
        assert out.shape == (3, 2)
        assert np.allclose(out, self.logits, atol=1e-3)

    def test_export_levelwise_stage(self):
        """A model exported mid-schedule keeps its wider grid."""
        qat.set_level(self.model, 3)
        with torch.no_grad():
            logits = self.model(self.x).numpy()
        exported = qat.export_model(self.model, stage_L=3)
        assert exported.block.q_proj.act_state.mode == QuantMode.levelwise(3)
        assert exported.block.ffn2.act_state.mode == QuantMode.bool_()
        assert np.allclose(exported.forward_batch(self.x.numpy()), logits, atol=1e-3)

    def test_exported_scales(self):
        """Every exported scale is the torch quantizer's scale."""
        exported = qat.export_block(self.model.block)
        attn = self.model.block.attn
        assert exported.attention.s_q.scale == pytest.approx(float(attn.q_quant.scale))
        assert exported.ffn1.act_state.scale == pytest.approx(float(self.model.block.ffn1.act_quant.scale))
