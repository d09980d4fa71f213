"""Attention tests: both flavors against independent oracles, step forms
against whole-sequence forms, cache capacity rules, and the gated wiring."""

import math

import pytest
import torch
import torch.nn.functional as F

from iflame.attention import (
    AttentionLayer,
    ContextOverflowError,
    KVRing,
    LinearState,
    full_attention_parallel,
    full_attention_step,
    linear_attention_parallel,
    linear_attention_step,
)
from iflame.nn_primitives import RotaryTable, rms_normalize


def make_qkv(seed, batch, heads, n, head_dim, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    shape = (batch, heads, n, head_dim)
    return (torch.randn(shape, generator=gen, dtype=dtype),
            torch.randn(shape, generator=gen, dtype=dtype),
            torch.randn(shape, generator=gen, dtype=dtype))


class TestFullAttention:
    def test_matches_torch_sdpa(self):
        # the fused torch kernel is an independent implementation of the same math
        for seed in range(5):
            q, k, v = make_qkv(seed, 2, 4, 33, 16)
            ours = full_attention_parallel(q, k, v)
            ref = F.scaled_dot_product_attention(q, k, v, is_causal=True)
            assert torch.allclose(ours, ref, atol=1e-5), seed

    def test_first_position_returns_v0(self):
        q, k, v = make_qkv(9, 1, 2, 5, 8)
        out = full_attention_parallel(q, k, v)
        assert torch.allclose(out[:, :, 0], v[:, :, 0])

    def test_constant_values_pass_through(self):
        # if every value row is the same vector, convexity forces the output
        # to equal it at every position (softmax weights sum to 1)
        q, k, _ = make_qkv(10, 1, 2, 12, 8)
        row = torch.randn(8, generator=torch.Generator().manual_seed(11))
        v = row.expand(1, 2, 12, 8).clone()
        out = full_attention_parallel(q, k, v)
        assert torch.allclose(out, v, atol=1e-5)

    def test_causal_exactness(self):
        q, k, v = make_qkv(12, 1, 2, 20, 8)
        base = full_attention_parallel(q, k, v)
        k2, v2 = k.clone(), v.clone()
        k2[:, :, 15:] += 3.0
        v2[:, :, 15:] -= 2.0
        changed = full_attention_parallel(q, k2, v2)
        assert torch.equal(base[:, :, :15], changed[:, :, :15])

    def test_step_matches_parallel(self):
        q, k, v = make_qkv(13, 1, 4, 30, 16)
        parallel = full_attention_parallel(q, k, v)[0]
        ring = KVRing(30, 4, 16)
        for t in range(30):
            out = full_attention_step(q[0, :, t], k[0, :, t], v[0, :, t], ring)
            assert torch.allclose(out, parallel[:, t], atol=1e-5), t


class TestLinearAttention:
    def test_matches_python_loop_oracle(self):
        q, k, v = make_qkv(20, 1, 2, 17, 8, dtype=torch.float64)
        ours = linear_attention_parallel(q, k, v)
        state = torch.zeros(2, 8, 8, dtype=torch.float64)
        for t in range(17):
            state = state + torch.einsum("hd,he->hde", k[0, :, t], v[0, :, t])
            expect = rms_normalize(torch.einsum("hd,hde->he", q[0, :, t], state))
            assert torch.allclose(ours[0, :, t], expect, atol=1e-12), t

    def test_recurrent_step_equals_parallel_many_seeds(self):
        for seed in range(50):
            q, k, v = make_qkv(seed, 1, 2, 64, 8)
            parallel = linear_attention_parallel(q, k, v)[0]
            state = LinearState(2, 8)
            worst = 0.0
            for t in range(64):
                out = linear_attention_step(q[0, :, t], k[0, :, t], v[0, :, t], state)
                worst = max(worst, float((out - parallel[:, t]).abs().max()
                                         / parallel.abs().max()))
            assert worst < 1e-5, (seed, worst)

    def test_zero_input_is_finite(self):
        z = torch.zeros(1, 2, 4, 8)
        out = linear_attention_parallel(z, z, z)
        assert torch.isfinite(out).all() and out.abs().max() == 0

    def test_causal_exactness(self):
        q, k, v = make_qkv(21, 1, 2, 20, 8)
        base = linear_attention_parallel(q, k, v)
        k2, v2 = k.clone(), v.clone()
        k2[:, :, 12:] += 1.0
        v2[:, :, 12:] += 1.0
        changed = linear_attention_parallel(q, k2, v2)
        assert torch.equal(base[:, :, :12], changed[:, :, :12])

    def test_no_scale_factor(self):
        # unlike softmax attention there is no 1/sqrt(d) inside; doubling q
        # before normalization leaves the normalized output unchanged
        q, k, v = make_qkv(22, 1, 2, 6, 8)
        a = linear_attention_parallel(q, k, v)
        b = linear_attention_parallel(2 * q, k, v)
        assert torch.allclose(a, b, atol=1e-5)
        raw_a = linear_attention_parallel(q, k, v, normalize=False)
        raw_b = linear_attention_parallel(2 * q, k, v, normalize=False)
        assert torch.allclose(2 * raw_a, raw_b, atol=1e-5)


class TestKVRing:
    def test_capacity_overflow_raises(self):
        ring = KVRing(4, 2, 8)
        k = torch.randn(2, 8)
        for _ in range(4):
            ring.append(k, k)
        with pytest.raises(ContextOverflowError):
            ring.append(k, k)

    def test_contents_in_order(self):
        ring = KVRing(5, 1, 2)
        rows = [torch.full((1, 2), float(i)) for i in range(3)]
        for r in rows:
            ring.append(r, -r)
        assert torch.equal(ring.keys(), torch.stack(rows))
        assert torch.equal(ring.values(), -torch.stack(rows))
        assert ring.count == 3

    def test_nbytes_is_allocated_capacity(self):
        ring = KVRing(10, 4, 16)
        assert ring.nbytes() == 10 * 4 * 16 * 4 * 2  # cap * H * d_h * fp32 * (K and V)
        ring.append(torch.zeros(4, 16), torch.zeros(4, 16))
        assert ring.nbytes() == 10 * 4 * 16 * 4 * 2  # unchanged by fill level


class TestLinearState:
    def test_accumulates_outer_products(self):
        state = LinearState(2, 4, dtype=torch.float64)
        gen = torch.Generator().manual_seed(30)
        total = torch.zeros(2, 4, 4, dtype=torch.float64)
        for _ in range(6):
            k = torch.randn(2, 4, generator=gen, dtype=torch.float64)
            v = torch.randn(2, 4, generator=gen, dtype=torch.float64)
            state.update(k, v)
            total += k.unsqueeze(-1) * v.unsqueeze(-2)
        assert torch.allclose(state.state, total, atol=1e-12)
        assert state.count == 6

    def test_constant_memory(self):
        state = LinearState(4, 16)
        before = state.nbytes()
        for _ in range(100):
            state.update(torch.randn(4, 16), torch.randn(4, 16))
        assert state.nbytes() == before == 4 * 16 * 16 * 4


class TestAttentionLayer:
    @pytest.mark.parametrize("kind,gated", [("full", False), ("linear", False), ("linear", True)])
    def test_step_matches_forward(self, kind, gated):
        torch.manual_seed(40)
        layer = AttentionLayer(32, 4, kind, gated=gated).eval()
        rope = RotaryTable(8, 64)
        x = torch.randn(1, 20, 32)
        with torch.no_grad():
            ref = layer(x, rope, torch.arange(20))[0]
            cache = layer.new_cache(20)
            for t in range(20):
                out = layer.step(x[0, t], t, cache, rope)
                assert torch.allclose(out, ref[t], atol=1e-5), (kind, gated, t)

    def test_gate_wiring(self):
        # sigmoid output gate multiplies the concatenated heads before w_o
        torch.manual_seed(41)
        layer = AttentionLayer(16, 2, "linear", gated=True).eval()
        rope = RotaryTable(8, 8)
        x = torch.randn(1, 5, 16)
        with torch.no_grad():
            q = F.silu(layer.w_q(x)).view(1, 5, 2, 8).transpose(1, 2)
            k = F.silu(layer.w_k(x)).view(1, 5, 2, 8).transpose(1, 2)
            v = F.silu(layer.w_v(x)).view(1, 5, 2, 8).transpose(1, 2)
            q = rope.rotate(q, torch.arange(5))
            k = rope.rotate(k, torch.arange(5))
            inner = linear_attention_parallel(q, k, v).transpose(1, 2).reshape(1, 5, 16)
            expected = layer.w_o(inner * torch.sigmoid(layer.w_gate(x)))
            assert torch.allclose(layer(x, rope, torch.arange(5)), expected, atol=1e-6)

    def test_full_layer_never_gated(self):
        layer = AttentionLayer(16, 2, "full", gated=True)
        assert layer.w_gate is None and not layer.gated

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            AttentionLayer(30, 4, "full")
        with pytest.raises(ValueError):
            AttentionLayer(32, 4, "banana")
