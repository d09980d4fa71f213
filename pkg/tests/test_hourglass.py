"""Model-level tests: config validation, pooling/unpooling index math, the
three-scale forward pass, reduction to a plain stack, weight init/count, and
the checkpoint container."""

import numpy as np
import pytest
import torch

from conftest import micro_hourglass_config, micro_plain_config, seeded_tokens
from iflame.checkpoint import load_checkpoint, read_header, save_checkpoint
from iflame.hourglass import (
    Downsample,
    HourglassModel,
    ModelConfig,
    PlainModel,
    Upsample,
    build_model,
    parameter_count,
)


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.vocab_size == 131
        assert cfg.num_layers == 24
        assert cfg.head_dim == 32
        assert cfg.is_hourglass

    def test_scale_contexts_round_up(self):
        cfg = micro_hourglass_config(max_context=100)
        assert cfg.scale_context(0) == 100
        assert cfg.scale_context(1) == 34
        assert cfg.scale_context(2) == 12

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            ModelConfig(stage_depths=(2, 2))           # bad arity
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=30, heads=4)         # not divisible
        with pytest.raises(ValueError):
            ModelConfig(embed_dim=4, heads=4)          # odd head_dim
        with pytest.raises(ValueError):
            ModelConfig(pool_factor=1)
        with pytest.raises(ValueError):
            ModelConfig(layer_mix="sometimes")
        with pytest.raises(ValueError):
            ModelConfig(stage_depths=(4, 4, 0, 4, 4))


class TestPooling:
    def test_downsample_groups_of_three(self):
        torch.manual_seed(60)
        down = Downsample(8, 3)
        x = torch.randn(2, 10, 8)
        out = down(x)
        assert out.shape == (2, 3, 8)  # remainder position dropped
        manual = down.proj(x[:, 3:6].reshape(2, 24))
        assert torch.allclose(out[:, 1], manual)

    def test_upsample_shift_indexing(self):
        # fine positions 0,1 see the pad; 2,3,4 see group 0; 5,6,7 group 1
        torch.manual_seed(61)
        up = Upsample(8, 3)
        coarse = torch.randn(1, 2, 8)
        out = up(coarse, 8)
        proj = up.proj(coarse)
        assert torch.equal(out[0, 0], torch.zeros(8))
        assert torch.equal(out[0, 1], torch.zeros(8))
        for t in (2, 3, 4):
            assert torch.equal(out[0, t], proj[0, 0])
        for t in (5, 6, 7):
            assert torch.equal(out[0, t], proj[0, 1])

    def test_learned_pad_fills_head_positions(self):
        up = Upsample(8, 3, learned_pad=True)
        with torch.no_grad():
            up.pad.fill_(1.5)
        out = up(torch.randn(1, 1, 8), 4)
        assert torch.equal(out[0, 0], torch.full((8,), 1.5))
        assert torch.equal(out[0, 1], torch.full((8,), 1.5))

    def test_empty_coarse_gives_all_pad(self):
        up = Upsample(8, 3)
        out = up(torch.zeros(1, 0, 8), 2)
        assert out.shape == (1, 2, 8) and out.abs().max() == 0


class TestHourglassForward:
    def test_output_shape_and_counters(self):
        model = build_model(micro_hourglass_config(), seed=62).eval()
        tokens = seeded_tokens(63, 2, 270)
        with torch.no_grad():
            logits, counters = model.forward_with_counters(tokens)
        assert logits.shape == (2, 270, 131)
        assert counters == {"enc0": 270, "enc1": 90, "core": 30, "dec0": 90, "dec1": 270}

    def test_short_input_skips_coarse_scales(self):
        model = build_model(micro_hourglass_config(), seed=64).eval()
        for n in (1, 2, 5, 8, 9):
            tokens = seeded_tokens(65 + n, 1, n)
            with torch.no_grad():
                logits, counters = model.forward_with_counters(tokens)
            assert logits.shape == (1, n, 131)
            assert torch.isfinite(logits).all()
            assert counters["enc1"] == n // 3 and counters["core"] == n // 9

    def test_context_limit_enforced(self):
        model = build_model(micro_hourglass_config(max_context=27), seed=66)
        with pytest.raises(ValueError):
            model(seeded_tokens(0, 1, 28))

    def test_causality_through_all_scales(self):
        model = build_model(micro_hourglass_config(), seed=67).eval()
        gen = torch.Generator().manual_seed(68)
        tokens = seeded_tokens(69, 1, 54)
        for j in (1, 3, 9, 27, 53):
            other = tokens.clone()
            other[0, j] = (other[0, j] + 1 + int(torch.randint(129, (1,), generator=gen))) % 131
            with torch.no_grad():
                a = model(tokens)
                b = model(other)
            assert torch.equal(a[0, :j], b[0, :j]), j

    def test_reduces_to_plain_stack_when_inner_scales_are_silenced(self):
        # zeroing the projection that lifts dec0 features back to the token
        # scale removes every contribution of the pooled stages, leaving
        # embed -> enc0 -> dec1 -> head: a 4-layer plain stack
        config = micro_hourglass_config(stage_depths=(2, 2, 4, 2, 2), layer_mix="all_linear")
        model = build_model(config, seed=70).eval()
        with torch.no_grad():
            model.up_dec0.proj.weight.zero_()
        plain_cfg = micro_plain_config(stage_depths=(4,), layer_mix="all_linear")
        plain = build_model(plain_cfg, seed=71).eval()
        with torch.no_grad():
            plain.embed.weight.copy_(model.embed.weight)
            plain.head.weight.copy_(model.head.weight)
            for dst, src in zip(plain.stage.blocks,
                                list(model.enc0.blocks) + list(model.dec1.blocks)):
                dst.load_state_dict(src.state_dict())
        tokens = seeded_tokens(72, 2, 21)
        with torch.no_grad():
            a = model(tokens)
            b = plain(tokens)
        assert torch.allclose(a, b, atol=1e-6)


class TestPlainModel:
    def test_forward_shape(self):
        model = build_model(micro_plain_config(), seed=73).eval()
        tokens = seeded_tokens(74, 3, 50)
        with torch.no_grad():
            logits = model(tokens)
        assert logits.shape == (3, 50, 131)

    def test_hourglass_config_rejected(self):
        with pytest.raises(ValueError):
            PlainModel(micro_hourglass_config())
        with pytest.raises(ValueError):
            HourglassModel(micro_plain_config())


class TestParameters:
    def test_count_matches_closed_form(self):
        # micro config, all-linear ungated: embed + head + per-block
        # (4 attn mats + 2 norms + 3 ffn mats) + 2 pool + 2 unpool mats
        d, h_ffn, vocab = 64, 192, 131
        cfg = micro_hourglass_config(layer_mix="all_linear")
        model = build_model(cfg)
        per_block = 4 * d * d + 2 * d + 2 * (d * h_ffn) + h_ffn * d
        blocks = sum(cfg.stage_depths) * per_block
        pools = 2 * (3 * d * d) + 2 * (d * d)
        expected = vocab * d * 2 + blocks + pools
        assert parameter_count(model) == expected

    def test_gating_adds_one_matrix_per_linear_layer(self):
        base = parameter_count(build_model(micro_plain_config(layer_mix="all_linear")))
        gated = parameter_count(build_model(micro_plain_config(layer_mix="all_linear",
                                                               linear_gated=True)))
        d = 64
        assert gated - base == 8 * d * d

    def test_tied_embedding_counts_once(self):
        cfg = micro_plain_config()
        untied = parameter_count(build_model(cfg))
        tied = parameter_count(build_model(micro_plain_config(tie_embedding=True)))
        assert untied - tied == 131 * 64

    def test_deterministic_init(self):
        a = build_model(micro_hourglass_config(), seed=75)
        b = build_model(micro_hourglass_config(), seed=75)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = build_model(micro_hourglass_config(), seed=76)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, extra={"note": "round-trip"})
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name, tensor in model.state_dict().items():
            assert torch.equal(loaded.state_dict()[name], tensor), name
        tokens = seeded_tokens(77, 1, 18)
        with torch.no_grad():
            assert torch.equal(model.eval()(tokens), loaded(tokens))

    def test_header_contents(self, tmp_path):
        model = build_model(micro_plain_config(), seed=78)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path, extra={"final_loss": 0.5})
        header = read_header(path)
        assert header["config"]["embed_dim"] == 64
        assert header["extra"]["final_loss"] == 0.5
        names = {e["name"] for e in header["manifest"]}
        assert "embed.weight" in names and "head.weight" in names

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = build_model(micro_plain_config(stage_depths=(1,)), seed=79)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 100])
        with pytest.raises(ValueError):
            load_checkpoint(path)
