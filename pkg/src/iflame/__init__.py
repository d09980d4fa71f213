"""Autoregressive triangle-mesh generation with interleaved full/linear
attention inside a three-scale hourglass transformer, plus an incremental
decoding engine whose outputs match the whole-sequence model exactly."""

from .attention import ContextOverflowError, KVRing, LinearState
from .checkpoint import load_checkpoint, save_checkpoint
from .hourglass import HourglassModel, ModelConfig, PlainModel, build_model, parameter_count
from .inference import (
    CacheReport,
    InferenceSession,
    SamplerConfig,
    cache_report,
    complete,
    generate,
    sample_token,
    update_schedule,
)
from .mesh_codec import (
    Mesh,
    QuantizerConfig,
    canonicalize,
    detokenize,
    load_obj,
    normalize,
    save_obj,
    tokenize,
)
from .training import EvalReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CacheReport", "ContextOverflowError", "EvalReport", "HourglassModel",
    "InferenceSession", "KVRing", "LinearState", "Mesh", "ModelConfig",
    "PlainModel", "QuantizerConfig", "SamplerConfig", "TrainConfig",
    "build_model", "cache_report", "canonicalize", "complete", "detokenize",
    "evaluate", "generate", "load_checkpoint", "load_obj", "normalize",
    "parameter_count", "sample_token", "save_checkpoint", "save_obj",
    "tokenize", "train", "update_schedule",
]
