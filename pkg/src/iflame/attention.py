"""Causal attention in two flavors, each in two execution forms.

Full attention keeps per-position keys and values, so one decode step costs
O(t); linear attention folds history into one (head_dim x head_dim) matrix
per head, so one step costs O(1). The whole-sequence (parallel) forms are
the reference implementations; the step forms must match them exactly and
are what the decoding session uses.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nn_primitives import rms_normalize

NORM_EPS = 1e-6


class ContextOverflowError(RuntimeError):
    """A fixed-capacity cache was asked to hold more positions than it can."""


def full_attention_parallel(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Causal softmax attention. q, k, v: (..., n, head_dim)."""
    head_dim = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    n = q.shape[-2]
    future = torch.triu(torch.ones(n, n, dtype=torch.bool, device=q.device), diagonal=1)
    scores = scores.masked_fill(future, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def linear_attention_parallel(q, k, v, normalize: bool = True, eps: float = NORM_EPS) -> torch.Tensor:
    """Causal linear attention via prefix sums of k v^T outer products.

    Position t reads q_t^T (sum_{s<=t} k_s v_s^T), RMS-normalized per head.
    No softmax, no decay, no 1/sqrt(d) scaling.
    """
    kv = torch.cumsum(k.unsqueeze(-1) * v.unsqueeze(-2), dim=-3)  # (..., n, d_h, d_h)
    out = torch.einsum("...nd,...nde->...ne", q, kv)
    return rms_normalize(out, eps) if normalize else out


class KVRing:
    """Fixed-capacity per-layer key/value store, written at index t mod capacity.

    Capacity equals the maximum context at this cache's scale, so a write past
    capacity means the caller lost track of its budget: that is an error, not
    an eviction.
    """

    def __init__(self, capacity: int, heads: int, head_dim: int, dtype=torch.float32, device=None):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.count = 0
        self.k = torch.zeros(capacity, heads, head_dim, dtype=dtype, device=device)
        self.v = torch.zeros(capacity, heads, head_dim, dtype=dtype, device=device)

    def append(self, k_t: torch.Tensor, v_t: torch.Tensor) -> None:
        if self.count >= self.capacity:
            raise ContextOverflowError(
                f"KV ring of capacity {self.capacity} cannot hold position {self.count}"
            )
        self.k[self.count % self.capacity] = k_t
        self.v[self.count % self.capacity] = v_t
        self.count += 1

    def keys(self) -> torch.Tensor:
        return self.k[: self.count]

    def values(self) -> torch.Tensor:
        return self.v[: self.count]

    def nbytes(self) -> int:
        return (self.k.numel() + self.v.numel()) * self.k.element_size()


class LinearState:
    """Running sum of k v^T outer products: one (head_dim, head_dim) per head."""

    def __init__(self, heads: int, head_dim: int, dtype=torch.float32, device=None):
        self.state = torch.zeros(heads, head_dim, head_dim, dtype=dtype, device=device)
        self.count = 0

    def update(self, k_t: torch.Tensor, v_t: torch.Tensor) -> None:
        """k_t, v_t: (heads, head_dim)."""
        self.state += k_t.unsqueeze(-1) * v_t.unsqueeze(-2)
        self.count += 1

    def nbytes(self) -> int:
        return self.state.numel() * self.state.element_size()


def full_attention_step(q_t, k_t, v_t, ring: KVRing) -> torch.Tensor:
    """One decode step of softmax attention. q_t, k_t, v_t: (heads, head_dim)."""
    ring.append(k_t, v_t)
    head_dim = q_t.shape[-1]
    scores = torch.einsum("hd,thd->ht", q_t, ring.keys()) / math.sqrt(head_dim)
    weights = torch.softmax(scores, dim=-1)
    return torch.einsum("ht,thd->hd", weights, ring.values())


def linear_attention_step(q_t, k_t, v_t, state: LinearState, normalize: bool = True, eps: float = NORM_EPS):
    """One decode step of linear attention. q_t, k_t, v_t: (heads, head_dim)."""
    state.update(k_t, v_t)
    out = torch.einsum("hd,hde->he", q_t, state.state)
    return rms_normalize(out, eps) if normalize else out


class AttentionLayer(nn.Module):
    """Multi-head projection wrapper around either attention flavor.

    kind="full": softmax attention over a per-position KV cache.
    kind="linear": prefix-sum attention; ``gated=True`` adds SiLU on the
    q/k/v projections and an elementwise sigmoid output gate computed from
    the layer input. Rotary position encoding is applied to q and k after
    projection (and after the SiLU when gated).
    """

    def __init__(self, dim: int, heads: int, kind: str, *, gated: bool = False, norm_gain: bool = False):
        super().__init__()
        if kind not in ("full", "linear"):
            raise ValueError(f"unknown attention kind {kind!r}")
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.kind = kind
        self.gated = bool(gated) and kind == "linear"
        self.heads = heads
        self.head_dim = dim // heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        self.w_gate = nn.Linear(dim, dim, bias=False) if self.gated else None
        if norm_gain and kind == "linear":
            self.norm_gain = nn.Parameter(torch.ones(self.head_dim))
        else:
            self.norm_gain = None

    def forward(self, x: torch.Tensor, rope, positions: torch.Tensor) -> torch.Tensor:
        """Whole-sequence form. x: (batch, n, dim); positions: (n,) long."""
        batch, n, dim = x.shape
        q = self.w_q(x).view(batch, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.w_k(x).view(batch, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.w_v(x).view(batch, n, self.heads, self.head_dim).transpose(1, 2)
        if self.gated:
            q, k, v = F.silu(q), F.silu(k), F.silu(v)
        q = rope.rotate(q, positions)
        k = rope.rotate(k, positions)
        if self.kind == "full":
            out = full_attention_parallel(q, k, v)
        else:
            out = linear_attention_parallel(q, k, v)
            if self.norm_gain is not None:
                out = out * self.norm_gain
        out = out.transpose(1, 2).reshape(batch, n, dim)
        if self.gated:
            out = out * torch.sigmoid(self.w_gate(x))
        return self.w_o(out)

    def step(self, x_t: torch.Tensor, position: int, cache, rope) -> torch.Tensor:
        """Single-token form. x_t: (dim,); cache: KVRing or LinearState."""
        q = self.w_q(x_t).view(self.heads, self.head_dim)
        k = self.w_k(x_t).view(self.heads, self.head_dim)
        v = self.w_v(x_t).view(self.heads, self.head_dim)
        if self.gated:
            q, k, v = F.silu(q), F.silu(k), F.silu(v)
        q = rope.rotate(q, position)
        k = rope.rotate(k, position)
        if self.kind == "full":
            out = full_attention_step(q, k, v, cache)
        else:
            out = linear_attention_step(q, k, v, cache)
            if self.norm_gain is not None:
                out = out * self.norm_gain
        out = out.reshape(-1)
        if self.gated:
            out = out * torch.sigmoid(self.w_gate(x_t))
        return self.w_o(out)

    def new_cache(self, capacity: int, dtype=torch.float32, device=None):
        if self.kind == "full":
            return KVRing(capacity, self.heads, self.head_dim, dtype=dtype, device=device)
        return LinearState(self.heads, self.head_dim, dtype=dtype, device=device)
