"""Teacher-forced training loop, schedule, and evaluation metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import mesh_codec
from .mesh_codec import QuantizerConfig
from .nn_primitives import cross_entropy

logger = logging.getLogger(__name__)

TRAIN_CSV_HEADER = "step,lr,loss,tokens/s"
EVAL_CSV_HEADER = "split,token_acc,face_acc,ppl"


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_epochs: float = 2.0
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    augment: bool = False
    optimizer: str = "adamw"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs]")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to peak, then cosine decay to 0 at total_steps."""
    if step < 0 or total_steps < 1:
        raise ValueError("step must be >= 0 and total_steps >= 1")
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def pad_batch(sequences, pad_id: int) -> torch.Tensor:
    """Right-pad int sequences to a (batch, max_len) long tensor."""
    if not sequences:
        raise ValueError("empty batch")
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        out[row, : len(seq)] = torch.as_tensor(np.asarray(seq, dtype=np.int64))
    return out


def shift_targets(batch: torch.Tensor, pad_id: int):
    """(inputs, targets, mask): predict token t+1 from positions <= t."""
    inputs = batch[:, :-1]
    targets = batch[:, 1:]
    mask = targets != pad_id
    return inputs, targets, mask


def train_step(model, batch: torch.Tensor, optimizer, lr: float, pad_id: int,
               grad_clip: float = 1.0) -> float:
    """One optimization step; returns the scalar loss."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    inputs, targets, mask = shift_targets(batch, pad_id)
    logits = model(inputs)
    loss = cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), mask.reshape(-1))
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss {loss.item()} (lr={lr})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), max_norm=grad_clip)
    optimizer.step()
    return float(loss.item())


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=cfg.peak_lr,
                             weight_decay=cfg.weight_decay, betas=(0.9, 0.95))


def token_accuracy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> float:
    """Fraction of unmasked positions where argmax(logits) equals the target.

    Ties resolve to the lowest token id (torch.argmax returns the first
    maximal index).
    """
    mask = mask.to(torch.bool)
    if not mask.any():
        raise ValueError("token_accuracy: every position is masked")
    pred = logits.argmax(dim=-1)
    return float((pred[mask] == targets[mask]).to(torch.float64).mean().item())


def face_accuracy(logits: torch.Tensor, targets: torch.Tensor, bins: int) -> float:
    """Fraction of complete 9-token faces predicted entirely correctly.

    Coordinate targets (< bins) are grouped, in order, into consecutive
    9-token faces per sequence; special-token positions do not interrupt or
    join groups.
    """
    pred = logits.argmax(dim=-1)
    total = 0
    correct = 0
    for row in range(targets.shape[0]):
        coord_idx = (targets[row] < bins).nonzero(as_tuple=True)[0]
        n_faces = len(coord_idx) // 9
        for face in range(n_faces):
            idx = coord_idx[9 * face: 9 * (face + 1)]
            total += 1
            if bool((pred[row, idx] == targets[row, idx]).all()):
                correct += 1
    if total == 0:
        raise ValueError("face_accuracy: no complete face in targets")
    return correct / total


@dataclass
class EvalReport:
    split: str
    token_acc: float
    face_acc: float
    ppl: float

    def csv_row(self) -> str:
        return f"{self.split},{self.token_acc:.6f},{self.face_acc:.6f},{self.ppl:.6f}"


@torch.no_grad()
def evaluate(model, sequences, qcfg: QuantizerConfig, batch_size: int = 4, split: str = "eval") -> EvalReport:
    """Teacher-forced metrics over token sequences.

    ppl is exp of the same masked cross-entropy the trainer minimizes.
    """
    model.eval()
    nll_chunks = []
    tok_correct = 0
    tok_count = 0
    face_total = 0
    face_correct = 0
    for start in range(0, len(sequences), batch_size):
        batch = pad_batch(sequences[start: start + batch_size], qcfg.pad_id)
        inputs, targets, mask = shift_targets(batch, qcfg.pad_id)
        logits = model(inputs)
        logp = torch.log_softmax(logits, dim=-1)
        nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        nll_chunks.append(nll[mask])
        pred = logits.argmax(dim=-1)
        tok_correct += int((pred[mask] == targets[mask]).sum().item())
        tok_count += int(mask.sum().item())
        for row in range(targets.shape[0]):
            coord_idx = (targets[row] < qcfg.bins).nonzero(as_tuple=True)[0]
            for face in range(len(coord_idx) // 9):
                idx = coord_idx[9 * face: 9 * (face + 1)]
                face_total += 1
                face_correct += int(bool((pred[row, idx] == targets[row, idx]).all()))
    if tok_count == 0 or face_total == 0:
        raise ValueError("evaluate: no scorable positions")
    # single reduction over every scored position, so ppl is exp of the same
    # quantity cross_entropy returns on the concatenated batch
    mean_nll = torch.cat(nll_chunks).mean()
    return EvalReport(
        split=split,
        token_acc=tok_correct / tok_count,
        face_acc=face_correct / face_total,
        ppl=float(torch.exp(mean_nll).item()),
    )


def load_manifest(path):
    """One OBJ path per line (relative to the manifest's directory), '#' comments."""
    base = Path(path).parent
    meshes = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            mesh_path = Path(line)
            if not mesh_path.is_absolute():
                mesh_path = base / mesh_path
            meshes.append(mesh_codec.normalize(mesh_codec.load_obj(mesh_path)))
    if not meshes:
        raise ValueError(f"{path}: manifest lists no meshes")
    return meshes


def train(model, meshes, cfg: TrainConfig, qcfg: QuantizerConfig, log_path=None):
    """Train on normalized meshes; returns per-step history dicts.

    Steps per epoch is ceil(len(meshes) / batch_size); the schedule's total
    is epochs * steps_per_epoch. With augmentation on, each sample is
    re-tokenized every epoch under a seed derived from (cfg.seed, epoch,
    index), so runs are reproducible end to end.
    """
    if not meshes:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    steps_per_epoch = math.ceil(len(meshes) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))
    order_rng = np.random.default_rng(cfg.seed)
    base_tokens = [mesh_codec.tokenize(m, qcfg) for m in meshes]

    history = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh:
        log_fh.write(TRAIN_CSV_HEADER + "\n")
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(meshes))
            for batch_start in range(0, len(meshes), cfg.batch_size):
                chosen = order[batch_start: batch_start + cfg.batch_size]
                seqs = []
                for i in chosen:
                    if cfg.augment:
                        seed = (cfg.seed * 1_000_003 + epoch * 1_009 + int(i)) & 0x7FFFFFFF
                        seqs.append(mesh_codec.tokenize(mesh_codec.augment(meshes[i], seed), qcfg))
                    else:
                        seqs.append(base_tokens[i])
                batch = pad_batch(seqs, qcfg.pad_id)
                lr = lr_at(step, total_steps, warmup_steps, cfg.peak_lr)
                t0 = time.perf_counter()
                loss = train_step(model, batch, optimizer, lr, qcfg.pad_id, cfg.grad_clip)
                elapsed = time.perf_counter() - t0
                n_scored = int((batch[:, 1:] != qcfg.pad_id).sum().item())
                tokens_per_s = n_scored / elapsed if elapsed > 0 else 0.0
                record = {"step": step, "lr": lr, "loss": loss, "tokens_per_s": tokens_per_s}
                history.append(record)
                if log_fh:
                    log_fh.write(f"{step},{lr:.8g},{loss:.6f},{tokens_per_s:.2f}\n")
                step += 1
            if (epoch + 1) % max(1, cfg.epochs // 10) == 0 or epoch == cfg.epochs - 1:
                logger.info("epoch %d/%d loss=%.4f", epoch + 1, cfg.epochs, history[-1]["loss"])
    finally:
        if log_fh:
            log_fh.close()
    return history
