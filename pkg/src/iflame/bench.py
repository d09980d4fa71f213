"""Decode-loop benchmark across the five attention/architecture variants."""

from __future__ import annotations

import logging
import resource
import time
from dataclasses import dataclass, field

import torch

from .hourglass import ModelConfig, build_model
from .inference import InferenceSession, cache_report

logger = logging.getLogger(__name__)

VARIANTS = ("full", "linear", "I", "I+S", "I+S+H")

BENCH_CSV_HEADER = ("variant,n,batch,status,ms_per_token,tokens_per_s,"
                    "kv_bytes,state_bytes,buffer_bytes,baseline_bytes,reduction_pct,peak_rss_bytes")


def hourglass_depths(total_layers: int):
    """Split a layer budget over (enc0, enc1, core, dec0, dec1)."""
    if total_layers < 6 or total_layers % 6 != 0:
        raise ValueError(f"hourglass split needs a multiple of 6 layers, got {total_layers}")
    outer = total_layers // 6
    return (outer, outer, total_layers - 4 * outer, outer, outer)


def variant_config(variant: str, *, embed_dim: int = 512, heads: int = 16, bins: int = 128,
                   max_context: int = 7202, total_layers: int = 24) -> ModelConfig:
    """ModelConfig for one rung of the ablation ladder.

    full: plain stack, all softmax layers.
    linear: plain stack, all gated linear layers.
    I: plain stack, 3:1 gated-linear/full interleave.
    I+S: plain stack, 3:1 interleave with simplified (ungated) linear layers.
    I+S+H: the three-scale hourglass with simplified interleaved layers.
    """
    common = dict(embed_dim=embed_dim, heads=heads, bins=bins, max_context=max_context)
    if variant == "full":
        return ModelConfig(stage_depths=(total_layers,), layer_mix="all_full", **common)
    if variant == "linear":
        return ModelConfig(stage_depths=(total_layers,), layer_mix="all_linear",
                           linear_gated=True, **common)
    if variant == "I":
        return ModelConfig(stage_depths=(total_layers,), layer_mix="interleaved",
                           linear_gated=True, **common)
    if variant == "I+S":
        return ModelConfig(stage_depths=(total_layers,), layer_mix="interleaved",
                           linear_gated=False, **common)
    if variant == "I+S+H":
        return ModelConfig(stage_depths=hourglass_depths(total_layers),
                           layer_mix="interleaved", linear_gated=False, **common)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class BenchReport:
    variant: str
    n: int
    batch: int
    status: str = "ok"
    error: str = ""
    ms_per_token: float = float("nan")
    tokens_per_s: float = float("nan")
    kv_bytes: int = 0
    state_bytes: int = 0
    buffer_bytes: int = 0
    baseline_bytes: int = 0
    reduction_pct: float = 0.0
    peak_rss_bytes: int = 0
    run_seconds: list = field(default_factory=list)
    attn_samples: list = field(default_factory=list)

    def csv_row(self) -> str:
        return (f"{self.variant},{self.n},{self.batch},{self.status},"
                f"{self.ms_per_token:.6f},{self.tokens_per_s:.3f},"
                f"{self.kv_bytes},{self.state_bytes},{self.buffer_bytes},"
                f"{self.baseline_bytes},{self.reduction_pct:.4f},{self.peak_rss_bytes}")


def _median(values):
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        return ordered[mid]
    return 0.5 * (ordered[mid - 1] + ordered[mid])


@torch.no_grad()
def _decode_run(model, n: int, batch: int, start_token: int, record_attn_timing: bool = False):
    """One timed argmax decode pass of n tokens per session; returns
    (seconds, sessions)."""
    sessions = [InferenceSession(model, record_attn_timing and i == 0)
                for i in range(batch)]
    t0 = time.perf_counter()
    current = [start_token] * batch
    for _ in range(n):
        for i, session in enumerate(sessions):
            logits = session.process_token(current[i])
            current[i] = int(logits.argmax())
    return time.perf_counter() - t0, sessions


def run_decode_bench(variant: str, n: int, batch: int = 1, *, embed_dim: int = 512,
                     heads: int = 16, total_layers: int = 24, repeats: int = 3,
                     warmup_tokens: int = 32, seed: int = 0,
                     record_attn_timing: bool = False) -> BenchReport:
    """Time a full generation loop with sampling disabled (argmax).

    Weights are random-initialized: throughput and cache footprint do not
    depend on their values. Reports medians over ``repeats`` timed runs after
    one short warm run. Out-of-memory is reported as a structured failure row
    rather than raised.
    """
    config = variant_config(variant, embed_dim=embed_dim, heads=heads,
                            max_context=max(n, 1), total_layers=total_layers)
    if n < 1 or n > config.max_context:
        raise ValueError(f"n={n} outside (0, max_context={config.max_context}]")
    report = BenchReport(variant=variant, n=n, batch=batch)
    try:
        model = build_model(config, seed=seed)
        model.eval()
        start_token = config.bins  # [S]
        _decode_run(model, min(warmup_tokens, n), batch, start_token)
        runs = []
        sessions = None
        for _ in range(repeats):
            seconds, sessions = _decode_run(model, n, batch, start_token, record_attn_timing)
            runs.append(seconds)
        median = _median(runs)
        report.run_seconds = runs
        report.ms_per_token = median * 1000.0 / n
        report.tokens_per_s = batch * n / median
        if record_attn_timing and sessions:
            report.attn_samples = sessions[0].attn_samples
        cache = cache_report(config, n, use_ring_capacity=True, label=variant)
        measured = sessions[0].cache_nbytes() if sessions else {}
        report.kv_bytes = measured.get("kv_bytes", cache.kv_bytes)
        report.state_bytes = measured.get("state_bytes", cache.state_bytes)
        report.buffer_bytes = measured.get("buffer_bytes", cache.buffer_bytes)
        report.baseline_bytes = cache.baseline_bytes
        report.reduction_pct = cache.reduction_pct
        report.peak_rss_bytes = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    except (MemoryError, torch.cuda.OutOfMemoryError) as exc:
        report.status = "oom"
        report.error = str(exc)
        logger.error("bench %s n=%d B=%d out of memory: %s", variant, n, batch, exc)
    except RuntimeError as exc:
        if "memory" in str(exc).lower():
            report.status = "oom"
            report.error = str(exc)
            logger.error("bench %s n=%d B=%d out of memory: %s", variant, n, batch, exc)
        else:
            raise
    return report


def write_bench_csv(path, reports) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(BENCH_CSV_HEADER + "\n")
        for report in reports:
            fh.write(report.csv_row() + "\n")
