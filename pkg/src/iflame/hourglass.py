"""Token models: a three-scale hourglass and its single-scale siblings.

The hourglass runs encoder blocks on the raw coordinate stream, pools groups
of 3 into a vertex stream and groups of 9 into a face stream, runs a core on
the face stream, then upsamples back with a one-group shift so position t
only ever sees coarse features built from positions <= t. Skip connections
add the encoder output at the matching scale before each decoder stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .iblock import Stage
from .nn_primitives import RotaryTable


@dataclass
class ModelConfig:
    embed_dim: int = 512
    heads: int = 16
    stage_depths: tuple = (4, 4, 8, 4, 4)
    pool_factor: int = 3
    bins: int = 128
    max_context: int = 7202
    layer_mix: str = "interleaved"  # interleaved | all_full | all_linear
    linear_gated: bool = False
    full_position: str = "last"
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    ffn_hidden: int | None = None
    tie_embedding: bool = False
    learned_group_pad: bool = False
    linear_norm_gain: bool = False

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if len(self.stage_depths) not in (1, 5):
            raise ValueError("stage_depths must have 1 entry (plain) or 5 (hourglass)")
        if any(d < 1 for d in self.stage_depths):
            raise ValueError("every stage needs at least one layer")
        if self.embed_dim % self.heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if (self.embed_dim // self.heads) % 2 != 0:
            raise ValueError("head_dim must be even for rotary encoding")
        if self.pool_factor < 2:
            raise ValueError(f"pool_factor must be >= 2, got {self.pool_factor}")
        if not 2 <= self.bins <= 1024:
            raise ValueError(f"bins must be in [2, 1024], got {self.bins}")
        if self.max_context < 1:
            raise ValueError("max_context must be positive")
        if self.layer_mix not in ("interleaved", "all_full", "all_linear"):
            raise ValueError(f"unknown layer_mix {self.layer_mix!r}")
        if self.full_position not in ("last", "first"):
            raise ValueError(f"unknown full_position {self.full_position!r}")

    @property
    def vocab_size(self) -> int:
        return self.bins + 3

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def is_hourglass(self) -> bool:
        return len(self.stage_depths) == 5

    @property
    def num_layers(self) -> int:
        return sum(self.stage_depths)

    def scale_context(self, level: int) -> int:
        """Maximum positions at scale ``level`` (0 = token, 1 = pooled, ...)."""
        return math.ceil(self.max_context / self.pool_factor**level)


class Downsample(nn.Module):
    """Concatenate ``pool`` consecutive features and project back to dim."""

    def __init__(self, dim: int, pool: int):
        super().__init__()
        self.pool = pool
        self.proj = nn.Linear(pool * dim, dim, bias=False)

    def forward(self, x):
        """(batch, n, dim) -> (batch, n // pool, dim); remainder dropped."""
        batch, n, dim = x.shape
        m = n // self.pool
        return self.proj(x[:, : m * self.pool].reshape(batch, m, self.pool * dim))

    def step(self, group):
        """(pool, dim) -> (dim,): one complete group."""
        return self.proj(group.reshape(-1))


class Upsample(nn.Module):
    """Project coarse features and repeat each one over the next fine group.

    Fine position t reads the last coarse feature whose source group ends at
    or before t, i.e. coarse index (t + 1) // pool - 1. Positions before the
    first group closes read a pad vector (zeros, or learned).
    """

    def __init__(self, dim: int, pool: int, learned_pad: bool = False):
        super().__init__()
        self.pool = pool
        self.proj = nn.Linear(dim, dim, bias=False)
        if learned_pad:
            self.pad = nn.Parameter(torch.zeros(dim))
        else:
            self.register_buffer("pad", torch.zeros(dim), persistent=False)

    def forward(self, coarse, n_fine: int):
        """(batch, m, dim) -> (batch, n_fine, dim)."""
        batch, m, dim = coarse.shape
        up = self.proj(coarse)
        src = (torch.arange(n_fine, device=coarse.device) + 1) // self.pool - 1
        out = self.pad.to(coarse.dtype).expand(batch, n_fine, dim).clone()
        valid = src >= 0
        if valid.any():
            out[:, valid] = up[:, src[valid]]
        return out

    def step(self, c):
        """(dim,) -> (dim,): project one coarse feature."""
        return self.proj(c)

    def pad_vector(self, dtype, device):
        return self.pad.detach().to(dtype=dtype, device=device).clone()


class HourglassModel(nn.Module):
    """enc0 -> pool -> enc1 -> pool -> core -> unpool(+skip) -> dec0 -> unpool(+skip) -> dec1."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if not config.is_hourglass:
            raise ValueError("HourglassModel needs 5 stage depths")
        self.config = config
        d, h, p = config.embed_dim, config.heads, config.pool_factor
        stage_kwargs = dict(
            mix=config.layer_mix,
            gated=config.linear_gated,
            full_position=config.full_position,
            ffn_hidden=config.ffn_hidden,
            eps=config.norm_eps,
            norm_gain=config.linear_norm_gain,
        )
        depths = config.stage_depths
        self.embed = nn.Embedding(config.vocab_size, d)
        self.enc0 = Stage(d, h, depths[0], **stage_kwargs)
        self.down0 = Downsample(d, p)
        self.enc1 = Stage(d, h, depths[1], **stage_kwargs)
        self.down1 = Downsample(d, p)
        self.core = Stage(d, h, depths[2], **stage_kwargs)
        self.up_core = Upsample(d, p, config.learned_group_pad)
        self.dec0 = Stage(d, h, depths[3], **stage_kwargs)
        self.up_dec0 = Upsample(d, p, config.learned_group_pad)
        self.dec1 = Stage(d, h, depths[4], **stage_kwargs)
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        self.rope = RotaryTable(config.head_dim, config.max_context, config.rope_base)
        self.apply(_init_weights)
        if config.tie_embedding:
            self.head.weight = self.embed.weight

    @property
    def stages(self):
        return {"enc0": self.enc0, "enc1": self.enc1, "core": self.core,
                "dec0": self.dec0, "dec1": self.dec1}

    def forward(self, tokens):
        logits, _ = self.forward_with_counters(tokens)
        return logits

    def forward_with_counters(self, tokens):
        """Teacher-forced logits plus the number of positions each stage ran."""
        batch, n = tokens.shape
        if n > self.config.max_context:
            raise ValueError(f"sequence length {n} exceeds max_context {self.config.max_context}")
        p = self.config.pool_factor
        n_vertex = n // p
        n_face = n_vertex // p

        x = self.embed(tokens)
        pos0 = torch.arange(n, device=tokens.device)
        pos1 = torch.arange(n_vertex, device=tokens.device)
        pos2 = torch.arange(n_face, device=tokens.device)

        phi_coord = self.enc0(x, self.rope, pos0)
        phi_vertex = self.enc1(self.down0(phi_coord), self.rope, pos1)
        core_out = self.core(self.down1(phi_vertex), self.rope, pos2)
        dec0_out = self.dec0(self.up_core(core_out, n_vertex) + phi_vertex, self.rope, pos1)
        dec1_out = self.dec1(self.up_dec0(dec0_out, n) + phi_coord, self.rope, pos0)
        counters = {"enc0": n, "enc1": n_vertex, "core": n_face, "dec0": n_vertex, "dec1": n}
        return self.head(dec1_out), counters


class PlainModel(nn.Module):
    """Single-scale stack with the same block/embedding/head construction."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.is_hourglass:
            raise ValueError("PlainModel needs a single stage depth")
        self.config = config
        d = config.embed_dim
        self.embed = nn.Embedding(config.vocab_size, d)
        self.stage = Stage(
            d, config.heads, config.stage_depths[0],
            mix=config.layer_mix, gated=config.linear_gated,
            full_position=config.full_position, ffn_hidden=config.ffn_hidden,
            eps=config.norm_eps, norm_gain=config.linear_norm_gain,
        )
        self.head = nn.Linear(d, config.vocab_size, bias=False)
        self.rope = RotaryTable(config.head_dim, config.max_context, config.rope_base)
        self.apply(_init_weights)
        if config.tie_embedding:
            self.head.weight = self.embed.weight

    def forward(self, tokens):
        batch, n = tokens.shape
        if n > self.config.max_context:
            raise ValueError(f"sequence length {n} exceeds max_context {self.config.max_context}")
        x = self.embed(tokens)
        positions = torch.arange(n, device=tokens.device)
        return self.head(self.stage(x, self.rope, positions))


def _init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)


def build_model(config: ModelConfig, dtype=None, seed: int | None = None):
    """Construct the model the config describes, optionally seeded and cast."""
    if seed is not None:
        torch.manual_seed(seed)
    model = HourglassModel(config) if config.is_hourglass else PlainModel(config)
    if dtype is not None:
        model = model.to(dtype)
    return model


def parameter_count(model: nn.Module) -> int:
    """Unique trainable parameters (tied tensors counted once)."""
    seen = set()
    total = 0
    for p in model.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.numel()
    return total
