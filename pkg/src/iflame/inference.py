"""Token-by-token decoding with per-scale selective updates and bounded caches.

The decoding session feeds one token at a time. The coordinate-scale stages
run every step; the vertex-scale stages run only when a group of 3
coordinates completes; the face-scale core runs only when a group of 9
completes. Decoder inputs between coarse updates reuse the last projected
coarse feature, which reproduces the shifted upsampling of the
whole-sequence model exactly. Full-attention layers keep a KV ring sized to
their scale's maximum context; linear layers keep one (head_dim, head_dim)
state matrix per head.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch

from .attention import ContextOverflowError, KVRing, LinearState
from .hourglass import HourglassModel, ModelConfig
from .iblock import stage_kinds
from .mesh_codec import QuantizerConfig

logger = logging.getLogger(__name__)


class UpdateFlags(NamedTuple):
    enc0: bool
    enc1: bool
    core: bool
    dec0: bool
    dec1: bool


def update_schedule(t: int, pool: int = 3) -> UpdateFlags:
    """Which stages advance while processing coordinate position t.

    Coordinate stages always run. Vertex stages run when position t completes
    a group of ``pool`` coordinates; the face core runs when it completes a
    group of ``pool**2``.
    """
    vertex = (t + 1) % pool == 0
    face = (t + 1) % (pool * pool) == 0
    return UpdateFlags(enc0=True, enc1=vertex, core=face, dec0=vertex, dec1=True)


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 50
    top_p: float = 0.95
    seed: int = 0
    strict_grammar: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")


def sample_token(logits: torch.Tensor, cfg: SamplerConfig, generator=None, mask_ids=()) -> int:
    """Temperature -> top-k -> top-p (nucleus) -> renormalize -> draw.

    The nucleus is the smallest prefix of the descending-probability order
    whose cumulative mass reaches top_p. ``mask_ids`` are excluded before
    anything else.
    """
    logits = logits.detach().to(torch.float32).clone()
    for i in mask_ids:
        logits[i] = float("-inf")
    logits = logits / cfg.temperature
    k = min(cfg.top_k, logits.numel())
    if k < logits.numel():
        kth = torch.topk(logits, k).values[-1]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    sorted_probs, sorted_ids = torch.sort(probs, descending=True)
    cumulative = torch.cumsum(sorted_probs, dim=-1)
    cut = int(torch.searchsorted(cumulative, torch.tensor(cfg.top_p, dtype=cumulative.dtype)))
    cut = min(cut, logits.numel() - 1)
    kept = sorted_probs[: cut + 1]
    kept = kept / kept.sum()
    choice = torch.multinomial(kept, 1, generator=generator)
    return int(sorted_ids[choice])


class InferenceSession:
    """Stateful single-sequence decoder. Not thread-safe; one session per stream.

    ``process_token`` consumes one token id and returns next-token logits
    identical (to float tolerance) to the last row of the whole-sequence
    forward pass over every token fed so far.
    """

    def __init__(self, model, record_attn_timing: bool = False):
        self.model = model
        self.config: ModelConfig = model.config
        param = next(model.parameters())
        self.dtype = param.dtype
        self.device = param.device
        self.position = 0
        self.attn_samples = [] if record_attn_timing else None
        cfg = self.config
        d = cfg.embed_dim
        if cfg.is_hourglass:
            p = cfg.pool_factor
            self.enc0_caches = model.enc0.new_caches(cfg.scale_context(0), self.dtype, self.device)
            self.enc1_caches = model.enc1.new_caches(cfg.scale_context(1), self.dtype, self.device)
            self.core_caches = model.core.new_caches(cfg.scale_context(2), self.dtype, self.device)
            self.dec0_caches = model.dec0.new_caches(cfg.scale_context(1), self.dtype, self.device)
            self.dec1_caches = model.dec1.new_caches(cfg.scale_context(0), self.dtype, self.device)
            self.coord_group = torch.zeros(p, d, dtype=self.dtype, device=self.device)
            self.vertex_group = torch.zeros(p, d, dtype=self.dtype, device=self.device)
            self.core_feature = model.up_core.pad_vector(self.dtype, self.device)
            self.dec0_feature = model.up_dec0.pad_vector(self.dtype, self.device)
        else:
            self.layer_caches = model.stage.new_caches(cfg.scale_context(0), self.dtype, self.device)

    def _timer(self, kind: str, seconds: float) -> None:
        self.attn_samples.append((self.position, kind, seconds))

    @torch.no_grad()
    def process_token(self, token_id: int) -> torch.Tensor:
        """Advance one position; returns logits of shape (vocab,)."""
        t = self.position
        if t >= self.config.max_context:
            raise ContextOverflowError(
                f"session is full: max_context={self.config.max_context}"
            )
        model = self.model
        timer = None if self.attn_samples is None else self._timer
        x = model.embed(torch.tensor(token_id, device=self.device))
        if not self.config.is_hourglass:
            out = model.stage.step(x, t, self.layer_caches, model.rope, timer)
            self.position = t + 1
            return model.head(out)

        p = self.config.pool_factor
        flags = update_schedule(t, p)
        e0 = model.enc0.step(x, t, self.enc0_caches, model.rope, timer)
        self.coord_group[t % p] = e0
        if flags.enc1:
            u = (t + 1) // p - 1
            # the group in chronological order: positions t-p+1 .. t
            group = self.coord_group[[(t - i) % p for i in range(p - 1, -1, -1)]]
            z = model.down0.step(group)
            e1 = model.enc1.step(z, u, self.enc1_caches, model.rope, timer)
            self.vertex_group[u % p] = e1
            if flags.core:
                f = (t + 1) // (p * p) - 1
                vgroup = self.vertex_group[[(u - i) % p for i in range(p - 1, -1, -1)]]
                zb = model.down1.step(vgroup)
                core_out = model.core.step(zb, f, self.core_caches, model.rope, timer)
                self.core_feature = model.up_core.step(core_out)
            d0 = model.dec0.step(self.core_feature + e1, u, self.dec0_caches, model.rope, timer)
            self.dec0_feature = model.up_dec0.step(d0)
        d1 = model.dec1.step(self.dec0_feature + e0, t, self.dec1_caches, model.rope, timer)
        self.position = t + 1
        return model.head(d1)

    def cache_nbytes(self) -> dict:
        """Actual bytes held right now, keyed like the analytic report."""
        if self.config.is_hourglass:
            caches = (self.enc0_caches + self.enc1_caches + self.core_caches
                      + self.dec0_caches + self.dec1_caches)
            buffers = [self.coord_group, self.vertex_group, self.core_feature, self.dec0_feature]
        else:
            caches = self.layer_caches
            buffers = []
        kv = sum(c.nbytes() for c in caches if isinstance(c, KVRing))
        state = sum(c.nbytes() for c in caches if isinstance(c, LinearState))
        buf = sum(b.numel() * b.element_size() for b in buffers)
        return {"kv_bytes": kv, "state_bytes": state, "buffer_bytes": buf}


def _coordinate_budget(max_faces: int) -> int:
    if max_faces < 1:
        raise ValueError(f"max_faces must be >= 1, got {max_faces}")
    return 9 * max_faces


def _sample_until_stop(session, qcfg, sampler, tokens, coords_done, budget, generator, last_logits):
    """Shared tail of generate/complete: sample until [E], budget, or misfire."""
    logits = last_logits
    while coords_done < budget:
        mask_ids = ()
        if sampler.strict_grammar:
            mask_ids = [qcfg.start_id, qcfg.pad_id]
            if coords_done % 9 != 0:
                mask_ids.append(qcfg.end_id)
        nxt = sample_token(logits, sampler, generator, mask_ids=mask_ids)
        if nxt == qcfg.end_id:
            tokens.append(nxt)
            break
        if nxt >= qcfg.bins:
            logger.debug("sampled special token %d mid-face; stopping", nxt)
            break
        tokens.append(nxt)
        coords_done += 1
        if coords_done >= budget:
            break
        logits = session.process_token(nxt)
    return np.asarray(tokens, dtype=np.int64)


def generate(model, sampler: SamplerConfig = SamplerConfig(), max_faces: int = 800) -> np.ndarray:
    """Sample a token sequence from [S]; stops at [E] or 9 * max_faces coords."""
    qcfg = QuantizerConfig(model.config.bins)
    budget = _coordinate_budget(max_faces)
    generator = torch.Generator(device="cpu").manual_seed(sampler.seed)
    session = InferenceSession(model)
    tokens = [qcfg.start_id]
    logits = session.process_token(qcfg.start_id)
    return _sample_until_stop(session, qcfg, sampler, tokens, 0, budget, generator, logits)


def complete(model, prefix, sampler: SamplerConfig = SamplerConfig(), max_faces: int = 800) -> np.ndarray:
    """Feed a [S]-prefixed partial sequence, then keep sampling.

    The prefix must be [S] followed by whole 9-token faces (coordinate tokens
    only). ``max_faces`` bounds the total face count, prefix included.
    """
    qcfg = QuantizerConfig(model.config.bins)
    prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
    if len(prefix) == 0 or prefix[0] != qcfg.start_id:
        raise ValueError("prefix must begin with the start token")
    body = prefix[1:]
    if len(body) % 9 != 0:
        raise ValueError(f"prefix body of {len(body)} tokens is not whole faces (9 tokens each)")
    if len(body) and (body.min() < 0 or body.max() >= qcfg.bins):
        raise ValueError("prefix body may contain only coordinate tokens")
    budget = _coordinate_budget(max_faces)
    if len(body) >= budget:
        raise ValueError(f"prefix already has {len(body) // 9} faces; max_faces={max_faces} leaves no budget")
    generator = torch.Generator(device="cpu").manual_seed(sampler.seed)
    session = InferenceSession(model)
    logits = None
    for tok in prefix:
        logits = session.process_token(int(tok))
    tokens = list(int(t) for t in prefix)
    return _sample_until_stop(session, qcfg, sampler, tokens, len(body), budget, generator, logits)


@dataclass
class CacheReport:
    label: str
    n: int
    kv_positions: int
    baseline_positions: int
    kv_bytes: int
    state_bytes: int
    buffer_bytes: int
    baseline_bytes: int
    reduction_pct: float
    bytes_per_element: int


def _stage_level(name: str) -> int:
    return {"enc0": 0, "enc1": 1, "core": 2, "dec0": 1, "dec1": 0}[name]


def cache_report(config: ModelConfig, n: int, bytes_per_element: int = 4,
                 use_ring_capacity: bool = False, label: str = "") -> CacheReport:
    """Analytic cache footprint after decoding n tokens.

    KV bytes count full-attention layers only: positions * 2 (K and V) *
    embed_dim * bytes. Pooled scales hold floor(n/3^level) positions by
    default; ``use_ring_capacity=True`` switches to the ceil rule the session
    allocates with (the two agree whenever n is divisible by pool^2). The
    baseline is an all-full stack of the same total depth, and the reduction
    is computed on KV bytes alone.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    p = config.pool_factor
    d = config.embed_dim

    def positions(level: int) -> int:
        if use_ring_capacity:
            return math.ceil(n / p**level)
        return n // p**level

    if config.is_hourglass:
        names = ("enc0", "enc1", "core", "dec0", "dec1")
        stage_of = {name: stage_kinds(depth, config.layer_mix, config.full_position)
                    for name, depth in zip(names, config.stage_depths)}
        kv_positions = sum(
            positions(_stage_level(name)) * kinds.count("full")
            for name, kinds in stage_of.items()
        )
        linear_layers = sum(kinds.count("linear") for kinds in stage_of.values())
        # two group buffers of `p` features plus two cached coarse features
        buffer_elems = (2 * p + 2) * d
    else:
        kinds = stage_kinds(config.stage_depths[0], config.layer_mix, config.full_position)
        kv_positions = n * kinds.count("full")
        linear_layers = kinds.count("linear")
        buffer_elems = 0

    kv_bytes = kv_positions * 2 * d * bytes_per_element
    state_bytes = linear_layers * config.heads * config.head_dim**2 * bytes_per_element
    buffer_bytes = buffer_elems * bytes_per_element
    baseline_positions = n * config.num_layers
    baseline_bytes = baseline_positions * 2 * d * bytes_per_element
    reduction = 100.0 * (1.0 - kv_bytes / baseline_bytes) if baseline_bytes else 0.0
    return CacheReport(
        label=label, n=n,
        kv_positions=kv_positions, baseline_positions=baseline_positions,
        kv_bytes=kv_bytes, state_bytes=state_bytes, buffer_bytes=buffer_bytes,
        baseline_bytes=baseline_bytes, reduction_pct=reduction,
        bytes_per_element=bytes_per_element,
    )


def format_cache_report(report: CacheReport) -> str:
    lines = [
        f"label            {report.label or '-'}",
        f"n                {report.n}",
        f"kv_positions     {report.kv_positions}",
        f"kv_bytes         {report.kv_bytes}",
        f"state_bytes      {report.state_bytes}",
        f"buffer_bytes     {report.buffer_bytes}",
        f"baseline_bytes   {report.baseline_bytes}",
        f"reduction_pct    {report.reduction_pct:.2f}",
    ]
    return "\n".join(lines)


CACHE_CSV_HEADER = "variant,n,kv_bytes,state_bytes,buffer_bytes,baseline_bytes,reduction_pct"


def cache_csv_row(report: CacheReport) -> str:
    return (f"{report.label},{report.n},{report.kv_bytes},{report.state_bytes},"
            f"{report.buffer_bytes},{report.baseline_bytes},{report.reduction_pct:.4f}")
