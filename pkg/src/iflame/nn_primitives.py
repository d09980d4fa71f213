"""Layer primitives shared by every model variant."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def rms_normalize(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """x / rms(x) over the last dimension, unit gain. Maps zero to zero."""
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_normalize(x, self.eps) * self.weight


def ffn_hidden_dim(dim: int, multiple: int = 64) -> int:
    """SwiGLU hidden width: 8/3 * dim rounded to a multiple of 64, floor 64."""
    return max(multiple, multiple * round(8 * dim / 3 / multiple))


class SwiGLU(nn.Module):
    """Gated feed-forward: down(silu(gate(x)) * up(x)), no biases."""

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or ffn_hidden_dim(dim)
        self.w_gate = nn.Linear(dim, hidden, bias=False)
        self.w_up = nn.Linear(dim, hidden, bias=False)
        self.w_down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class RotaryTable(nn.Module):
    """Precomputed rotations for consecutive (even, odd) feature pairs.

    Pair i of a ``head_dim``-wide vector is rotated by angle
    position * base^(-2i / head_dim). Tables are buffers so dtype/device
    follow the owning module; they are excluded from checkpoints.
    """

    def __init__(self, head_dim: int, max_positions: int, base: float = 10000.0):
        super().__init__()
        if head_dim % 2 != 0:
            raise ValueError(f"head_dim must be even for pairwise rotation, got {head_dim}")
        self.head_dim = head_dim
        self.max_positions = max_positions
        inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
        angles = torch.arange(max_positions, dtype=torch.float64)[:, None] * inv_freq
        self.register_buffer("cos", angles.cos().to(torch.float32), persistent=False)
        self.register_buffer("sin", angles.sin().to(torch.float32), persistent=False)

    def rotate(self, x: torch.Tensor, positions) -> torch.Tensor:
        """Rotate ``x`` (..., head_dim). ``positions`` is an int for a single
        step or a 1-D tensor matching x's second-to-last dimension."""
        if isinstance(positions, int):
            if positions >= self.max_positions:
                raise IndexError(f"position {positions} exceeds table size {self.max_positions}")
            cos, sin = self.cos[positions], self.sin[positions]
        else:
            if len(positions) and int(positions.max()) >= self.max_positions:
                raise IndexError(f"position {int(positions.max())} exceeds table size {self.max_positions}")
            cos, sin = self.cos[positions], self.sin[positions]
        x1 = x[..., 0::2]
        x2 = x[..., 1::2]
        r1 = x1 * cos - x2 * sin
        r2 = x1 * sin + x2 * cos
        return torch.stack((r1, r2), dim=-1).flatten(-2)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked positions.

    logits: (..., vocab); targets: (...) long; mask: (...) bool, True = scored.
    Perplexity is ``exp`` of the returned value.
    """
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    mask = mask.to(torch.bool)
    if not mask.any():
        raise ValueError("cross_entropy: every position is masked")
    return nll[mask].mean()
