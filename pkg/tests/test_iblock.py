"""Block/stage tests: interleave pattern, pre-norm residual wiring against a
hand-composed oracle, and step/forward agreement through full stacks."""

import pytest
import torch

from iflame.iblock import Block, Stage, layer_kind, stage_kinds
from iflame.nn_primitives import RotaryTable


class TestInterleavePattern:
    def test_every_fourth_layer_is_full(self):
        kinds = [layer_kind(i) for i in range(8)]
        assert kinds == ["linear"] * 3 + ["full"] + ["linear"] * 3 + ["full"]

    def test_full_first_variant(self):
        kinds = [layer_kind(i, "first") for i in range(8)]
        assert kinds == ["full"] + ["linear"] * 3 + ["full"] + ["linear"] * 3

    def test_24_layer_counts(self):
        kinds = stage_kinds(24, "interleaved")
        assert kinds.count("full") == 6
        assert kinds.count("linear") == 18

    def test_uniform_mixes(self):
        assert stage_kinds(5, "all_full") == ["full"] * 5
        assert stage_kinds(3, "all_linear") == ["linear"] * 3

    def test_unknown_mix_rejected(self):
        with pytest.raises(ValueError):
            stage_kinds(4, "mixed_up")
        with pytest.raises(ValueError):
            layer_kind(0, "middle")


class TestBlock:
    @pytest.mark.parametrize("kind", ["full", "linear"])
    def test_matches_composed_sublayers(self, kind):
        torch.manual_seed(50)
        block = Block(16, 2, kind).eval()
        rope = RotaryTable(8, 16)
        x = torch.randn(1, 6, 16)
        pos = torch.arange(6)
        with torch.no_grad():
            mid = x + block.attn(block.attn_norm(x), rope, pos)
            expected = mid + block.ffn(block.ffn_norm(mid))
            assert torch.allclose(block(x, rope, pos), expected)

    def test_residual_path_at_zero_weights(self):
        # with all projections zeroed the block is the identity
        block = Block(16, 2, "linear").eval()
        with torch.no_grad():
            for p in block.parameters():
                if p.dim() == 2:
                    p.zero_()
        x = torch.randn(2, 5, 16, generator=torch.Generator().manual_seed(51))
        rope = RotaryTable(8, 8)
        with torch.no_grad():
            out = block(x, rope, torch.arange(5))
        assert torch.allclose(out, x)

    def test_step_records_attention_timing(self):
        torch.manual_seed(52)
        block = Block(16, 2, "linear").eval()
        rope = RotaryTable(8, 8)
        samples = []
        cache = block.attn.new_cache(8)
        with torch.no_grad():
            block.step(torch.randn(16), 0, cache, rope, lambda kind, s: samples.append((kind, s)))
        assert len(samples) == 1
        assert samples[0][0] == "linear" and samples[0][1] > 0


class TestStage:
    def test_kinds_property(self):
        stage = Stage(16, 2, 8, "interleaved")
        assert stage.kinds == stage_kinds(8, "interleaved")

    def test_step_matches_forward(self):
        torch.manual_seed(53)
        stage = Stage(32, 4, 4, "interleaved").eval()
        rope = RotaryTable(8, 32)
        x = torch.randn(1, 15, 32)
        with torch.no_grad():
            ref = stage(x, rope, torch.arange(15))[0]
            caches = stage.new_caches(15)
            for t in range(15):
                out = stage.step(x[0, t], t, caches, rope)
                assert torch.allclose(out, ref[t], atol=1e-5), t

    def test_causality_under_perturbation(self):
        torch.manual_seed(54)
        stage = Stage(32, 4, 4, "interleaved").eval()
        rope = RotaryTable(8, 32)
        gen = torch.Generator().manual_seed(55)
        for trial in range(10):
            x = torch.randn(1, 12, 32, generator=gen)
            j = int(torch.randint(1, 12, (1,), generator=gen))
            x2 = x.clone()
            x2[0, j:] += torch.randn(12 - j, 32, generator=gen)
            with torch.no_grad():
                a = stage(x, rope, torch.arange(12))
                b = stage(x2, rope, torch.arange(12))
            assert torch.equal(a[0, :j], b[0, :j]), (trial, j)

    def test_empty_input_passes_through(self):
        stage = Stage(16, 2, 2, "all_linear")
        x = torch.zeros(2, 0, 16)
        out = stage(x, RotaryTable(8, 4), torch.arange(0))
        assert out.shape == (2, 0, 16)

    def test_new_caches_match_layer_kinds(self):
        from iflame.attention import KVRing, LinearState
        stage = Stage(16, 2, 8, "interleaved")
        caches = stage.new_caches(10)
        for kind, cache in zip(stage.kinds, caches):
            assert isinstance(cache, KVRing if kind == "full" else LinearState)
