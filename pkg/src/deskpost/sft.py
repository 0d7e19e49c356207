"""Supervised fine-tuning over packed instruction data."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import AdamW, backward, clip_grad_norm, ops
from .data import InstructionExample, PackedBatch, pack, render
from .metrics import MetricsWriter
from .model import TinyLM


class TrainingDiverged(RuntimeError):
    """Raised when a loss turns NaN or Inf; a diagnostics dump is written first."""


@dataclass(frozen=True)
class SFTConfig:
    learning_rate: float = 2e-5
    epochs: int = 2
    global_batch: int = 32
    warmup_ratio: float = 0.05
    schedule: str = "cosine"
    pack_len: int = 256
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.global_batch < 1 or self.epochs < 0:
            raise ValueError("global_batch must be >= 1 and epochs >= 0")


def lr_at(step: int, total_steps: int, config: SFTConfig) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero (or flat)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    peak = config.learning_rate
    warmup = config.warmup_ratio * total_steps
    if step < warmup:
        return peak * step / warmup
    if config.schedule == "constant" or total_steps <= warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def dump_diagnostics(run_dir, name: str, payload: dict) -> Path | None:
    if run_dir is None:
        return None
    path = Path(run_dir) / f"{name}.diagnostics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, default=lambda o: np.asarray(o).tolist()))
    return path


def packed_loss(model: TinyLM, batch: PackedBatch):
    inputs, targets, mask, segs = batch.targets()
    logits = model.forward(inputs, segs)
    return ops.cross_entropy(logits, targets, mask)


def sft_step(model: TinyLM, optimizer: AdamW, batch: PackedBatch, lr: float,
             grad_clip: float | None = 1.0, run_dir=None) -> float:
    """One masked cross-entropy update; returns the pre-update loss."""
    optimizer.zero_grad()
    try:
        loss = packed_loss(model, batch)
        value = float(loss.data)
    except FloatingPointError:
        loss, value = None, math.nan
    if not math.isfinite(value):
        path = dump_diagnostics(run_dir, "sft", {
            "loss": repr(value), "tokens": batch.tokens, "loss_mask": batch.loss_mask})
        raise TrainingDiverged(f"non-finite SFT loss {value}; diagnostics at {path}")
    backward(loss)
    clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step(lr)
    return value


def packed_rows(examples: Sequence[InstructionExample], pack_len: int,
                rng: np.random.Generator, skipped: Counter) -> list[PackedBatch]:
    order = rng.permutation(len(examples))
    rendered = (render(examples[int(i)], max_len=pack_len, skipped=skipped) for i in order)
    return list(pack((r for r in rendered if r is not None), pack_len))


def _stack(rows: list[PackedBatch]) -> PackedBatch:
    return PackedBatch(
        np.concatenate([r.tokens for r in rows]),
        np.concatenate([r.loss_mask for r in rows]),
        np.concatenate([r.segments for r in rows]),
        [b for r in rows for b in r.boundaries],
        rows[0].pack_len,
    )


def train_sft(model: TinyLM, examples: Sequence[InstructionExample], config: SFTConfig,
              run_dir=None, optimizer: AdamW | None = None) -> list[dict]:
    """Run ``config.epochs`` passes; metrics go to ``run_dir/sft_metrics.jsonl``."""
    rng = np.random.default_rng(config.seed)
    skipped: Counter = Counter()
    epochs = [packed_rows(examples, config.pack_len, rng, skipped) for _ in range(config.epochs)]
    per_epoch = [math.ceil(len(rows) / config.global_batch) for rows in epochs]
    total = sum(per_epoch)
    opt = optimizer or AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)
    writer = MetricsWriter(run_dir, "sft_metrics.jsonl")
    history = []
    step = 0
    for rows in epochs:
        for start in range(0, len(rows), config.global_batch):
            batch = _stack(rows[start:start + config.global_batch])
            lr = lr_at(step, total, config)
            loss = sft_step(model, opt, batch, lr, config.grad_clip, run_dir)
            rec = {"step": step, "loss": loss, "lr": lr}
            writer.write(rec)
            history.append(rec)
            step += 1
    writer.close()
    if skipped:
        history.append({"skipped": dict(skipped)})
    return history


def masked_sequence_loss(model: TinyLM, sequences: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Cross-entropy on ``tokens[t]`` wherever ``mask[t] == 1`` (no packing)."""
    T = max(len(t) for t, _ in sequences)
    toks = np.zeros((len(sequences), T), dtype=np.int64)
    mask = np.zeros((len(sequences), T))
    for i, (t, m) in enumerate(sequences):
        toks[i, :len(t)] = t
        mask[i, :len(m)] = m
    return ops.cross_entropy(model.forward(toks[:, :-1]), toks[:, 1:], mask[:, 1:])


def train_masked(model: TinyLM, sequences: Sequence[tuple[np.ndarray, np.ndarray]],
                 config: SFTConfig, steps: int, run_dir=None,
                 optimizer: AdamW | None = None) -> list[dict]:
    """SFT on pre-tokenised ``(tokens, mask)`` pairs such as tool-use trajectories.

    Batches of ``config.global_batch`` are drawn uniformly with replacement.
    """
    if not sequences:
        raise ValueError("no training sequences")
    rng = np.random.default_rng([config.seed, 20])
    opt = optimizer or AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay)
    writer = MetricsWriter(run_dir, "sft_metrics.jsonl")
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(sequences), size=config.global_batch)
        lr = lr_at(step, steps, config)
        opt.zero_grad()
        loss = masked_sequence_loss(model, [sequences[int(i)] for i in idx])
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite SFT loss {value}")
        backward(loss)
        clip_grad_norm(opt.params, config.grad_clip)
        opt.step(lr)
        rec = {"step": step, "loss": value, "lr": lr}
        writer.write(rec)
        history.append(rec)
    writer.close()
    return history
