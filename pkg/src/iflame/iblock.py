"""Pre-norm transformer blocks and stages with a 3:1 linear/full interleave."""

from __future__ import annotations

import time

import torch.nn as nn

from .attention import AttentionLayer
from .nn_primitives import RMSNorm, SwiGLU


def layer_kind(index: int, full_position: str = "last") -> str:
    """Attention flavor of layer ``index`` within an interleaved stack.

    Every fourth layer is full attention; the rest are linear. With
    ``full_position="last"`` the full layer closes each group of four
    (linear, linear, linear, full); ``"first"`` opens it.
    """
    if full_position == "last":
        return "full" if (index + 1) % 4 == 0 else "linear"
    if full_position == "first":
        return "full" if index % 4 == 0 else "linear"
    raise ValueError(f"unknown full_position {full_position!r}")


def stage_kinds(depth: int, mix: str, full_position: str = "last"):
    """Per-layer attention kinds for one stage."""
    if mix == "all_full":
        return ["full"] * depth
    if mix == "all_linear":
        return ["linear"] * depth
    if mix == "interleaved":
        return [layer_kind(i, full_position) for i in range(depth)]
    raise ValueError(f"unknown layer mix {mix!r}")


class Block(nn.Module):
    """Pre-norm residual block: attention sublayer then SwiGLU sublayer."""

    def __init__(self, dim: int, heads: int, kind: str, *, gated: bool = False,
                 ffn_hidden: int | None = None, eps: float = 1e-6, norm_gain: bool = False):
        super().__init__()
        self.attn_norm = RMSNorm(dim, eps)
        self.attn = AttentionLayer(dim, heads, kind, gated=gated, norm_gain=norm_gain)
        self.ffn_norm = RMSNorm(dim, eps)
        self.ffn = SwiGLU(dim, ffn_hidden)

    @property
    def kind(self) -> str:
        return self.attn.kind

    def forward(self, x, rope, positions):
        x = x + self.attn(self.attn_norm(x), rope, positions)
        return x + self.ffn(self.ffn_norm(x))

    def step(self, x_t, position, cache, rope, attn_timer=None):
        a_in = self.attn_norm(x_t)
        if attn_timer is None:
            a = self.attn.step(a_in, position, cache, rope)
        else:
            t0 = time.perf_counter()
            a = self.attn.step(a_in, position, cache, rope)
            attn_timer(self.attn.kind, time.perf_counter() - t0)
        x_t = x_t + a
        return x_t + self.ffn(self.ffn_norm(x_t))


class Stage(nn.Module):
    """A stack of blocks operating at a single sequence scale."""

    def __init__(self, dim: int, heads: int, depth: int, mix: str, *, gated: bool = False,
                 full_position: str = "last", ffn_hidden: int | None = None,
                 eps: float = 1e-6, norm_gain: bool = False):
        super().__init__()
        kinds = stage_kinds(depth, mix, full_position)
        self.blocks = nn.ModuleList(
            Block(dim, heads, kind, gated=gated, ffn_hidden=ffn_hidden, eps=eps, norm_gain=norm_gain)
            for kind in kinds
        )

    @property
    def kinds(self):
        return [b.kind for b in self.blocks]

    def forward(self, x, rope, positions):
        if x.shape[1] == 0:
            return x
        for block in self.blocks:
            x = block(x, rope, positions)
        return x

    def step(self, x_t, position, caches, rope, attn_timer=None):
        for block, cache in zip(self.blocks, caches):
            x_t = block.step(x_t, position, cache, rope, attn_timer)
        return x_t

    def new_caches(self, capacity: int, dtype=None, device=None):
        return [b.attn.new_cache(capacity, dtype=dtype, device=device) for b in self.blocks]
