"""On-policy distillation: mixed data sourcing, forward KL, model residency."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tokenizer as tok
from .autodiff import AdamW, Tensor, backward, clip_grad_norm, no_grad, ops
from .data import InstructionExample, render, render_prompt
from .metrics import MetricsWriter
from .model import SamplingParams, TinyLM, sample_batch
from .sft import TrainingDiverged, dump_diagnostics, lr_at

ON_POLICY = "on_policy"
REFERENCE = "reference"


@dataclass(frozen=True)
class DistillConfig:
    student_fraction: float = 0.25
    mode: str = "full"
    k: int | None = None
    learning_rate: float = 1e-6
    epochs: int = 1
    steps: int | None = None
    batch_size: int = 8
    max_completion: int = 2048
    temperature: float = 1.0
    top_p: float = 0.95
    warmup_ratio: float = 0.05
    schedule: str = "cosine"
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.student_fraction <= 1.0:
            raise ValueError("student_fraction must be in [0, 1]")
        if self.mode not in ("full", "topk"):
            raise ValueError(f"unknown distillation mode {self.mode!r}")
        if self.mode == "topk" and (self.k is None or self.k < 1):
            raise ValueError("topk mode needs k >= 1")


def choose_source(student_fraction: float, rng: np.random.Generator) -> str:
    """Bernoulli draw between student-generated and reference sequences."""
    if not 0.0 <= student_fraction <= 1.0:
        raise ValueError("student_fraction must be in [0, 1]")
    return ON_POLICY if rng.random() < student_fraction else REFERENCE


# -- targets and divergence -------------------------------------------------------

@dataclass
class DistillTarget:
    """Teacher next-token distributions at a run of positions.

    Full mode stores ``probs`` of shape ``[..., V]``. Top-K mode stores ``ids``
    and ``probs`` of shape ``[..., K]`` sorted by descending probability plus
    the leftover ``tail`` mass.
    """

    mode: str
    probs: np.ndarray
    ids: np.ndarray | None = None
    tail: np.ndarray | None = None

    @classmethod
    def from_logits(cls, logits: np.ndarray, mode: str = "full", k: int | None = None):
        z = logits - logits.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        if mode == "full":
            return cls("full", p)
        V = p.shape[-1]
        if not 1 <= k <= V:
            raise ValueError(f"k={k} outside [1, {V}]")
        order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
        top = np.take_along_axis(p, order, axis=-1)
        return cls("topk", top, order, 1.0 - top.sum(axis=-1))

    def validate(self, vocab_size: int | None = None) -> None:
        if np.any(self.probs < 0):
            raise ValueError("negative probability in target")
        if self.mode == "full":
            if not np.allclose(self.probs.sum(axis=-1), 1.0, atol=1e-9, rtol=0):
                raise ValueError("full target rows must sum to 1")
        else:
            if np.any(np.diff(self.probs, axis=-1) > 0):
                raise ValueError("top-k probabilities must be sorted descending")
            srt = np.sort(self.ids, axis=-1)
            if np.any(srt[..., 1:] == srt[..., :-1]):
                raise ValueError("top-k ids must be distinct")
            if vocab_size is not None and np.any(self.ids >= vocab_size):
                raise ValueError("top-k id outside the vocabulary")

    def dump_jsonl(self, path) -> None:
        """One line per position with (token id, probability) pairs."""
        probs = self.probs.reshape(-1, self.probs.shape[-1])
        ids = (np.broadcast_to(np.arange(probs.shape[-1]), probs.shape) if self.ids is None
               else self.ids.reshape(-1, self.ids.shape[-1]))
        tail = None if self.tail is None else self.tail.reshape(-1)
        with open(path, "w", encoding="utf-8") as fh:
            for pos in range(probs.shape[0]):
                rec = {"position": pos, "mode": self.mode,
                       "pairs": [[int(i), float(q)] for i, q in zip(ids[pos], probs[pos])]}
                if tail is not None:
                    rec["tail"] = float(tail[pos])
                fh.write(json.dumps(rec) + "\n")


LOG_FLOOR = -1e4


def _xlogx(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def forward_kl(target: DistillTarget, student_logits) -> Tensor:
    """KL(teacher || student) per position (scalar for a single position).

    Top-K mode renormalises both distributions over the teacher's top-K ids.
    Student log-probabilities are floored so the result is always finite.
    """
    logits = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    logp = ops.clip(ops.log_softmax(logits, axis=-1), LOG_FLOOR, np.inf)
    if target.mode == "full":
        if target.probs.shape != logits.shape:
            raise ValueError(f"teacher shape {target.probs.shape} != student {logits.shape}")
        p = target.probs
        neg_ent = _xlogx(p).sum(axis=-1)
        return neg_ent - ops.sum(logp * p, axis=-1)
    if target.ids.max() >= logits.shape[-1]:
        raise ValueError("top-k id outside the student vocabulary")
    q = target.probs / target.probs.sum(axis=-1, keepdims=True)
    sub = ops.log_softmax(ops.gather(logp, target.ids, axis=-1), axis=-1)
    return _xlogx(q).sum(axis=-1) - ops.sum(sub * q, axis=-1)


# -- residency -------------------------------------------------------------------

@dataclass(frozen=True)
class ResidencyEvent:
    time: int
    model_id: str
    tier: str
    action: str


class ResidencyError(RuntimeError):
    pass


class ResidencyToken:
    def __init__(self, manager: "ResidencyManager", model_id: str):
        self.manager = manager
        self.model_id = model_id
        self.released = False

    def release(self) -> None:
        self.manager.release(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self.released:
            self.release()


class ResidencyManager:
    """Keeps at most one model in the fast tier.

    A model stays resident after release until another model needs the tier.
    Acquiring while any token is outstanding is rejected rather than queued.
    ``swap_delay`` adds a synthetic sleep per load to model transfer cost.
    """

    def __init__(self, swap_delay: float = 0.0,
                 on_load: Callable[[str], None] | None = None,
                 on_evict: Callable[[str], None] | None = None):
        self._lock = threading.Lock()
        self._models: set[str] = set()
        self.resident: str | None = None
        self.held: ResidencyToken | None = None
        self.ledger: list[ResidencyEvent] = []
        self._clock = 0
        self.swap_delay = swap_delay
        self.on_load = on_load
        self.on_evict = on_evict

    def register(self, model_id: str) -> None:
        with self._lock:
            self._models.add(model_id)

    def _log(self, model_id: str, tier: str, action: str) -> None:
        self._clock += 1
        self.ledger.append(ResidencyEvent(self._clock, model_id, tier, action))

    def acquire(self, model_id: str) -> ResidencyToken:
        with self._lock:
            if model_id not in self._models:
                raise ResidencyError(f"model {model_id!r} is not registered")
            if self.held is not None:
                raise ResidencyError(
                    f"cannot acquire {model_id!r} while {self.held.model_id!r} is held")
            if self.resident != model_id:
                if self.resident is not None:
                    self._log(self.resident, "slow", "evict")
                    if self.on_evict:
                        self.on_evict(self.resident)
                if self.swap_delay:
                    time.sleep(self.swap_delay)
                self._log(model_id, "fast", "load")
                if self.on_load:
                    self.on_load(model_id)
                self.resident = model_id
            self.held = ResidencyToken(self, model_id)
            return self.held

    def release(self, token: ResidencyToken) -> None:
        with self._lock:
            if token is not self.held or token.released:
                raise ResidencyError("release of a token that is not held")
            token.released = True
            self.held = None


def check_ledger(events: Sequence[ResidencyEvent]) -> None:
    """Replay a ledger; raise if two models are ever fast-resident at once."""
    resident: str | None = None
    last_time = 0
    for ev in events:
        if ev.time <= last_time:
            raise AssertionError("ledger times must increase")
        last_time = ev.time
        if ev.action == "load":
            if ev.tier != "fast":
                raise AssertionError("loads go to the fast tier")
            if resident is not None:
                raise AssertionError(f"load of {ev.model_id} while {resident} resident")
            resident = ev.model_id
        elif ev.action == "evict":
            if ev.tier != "slow" or resident != ev.model_id:
                raise AssertionError(f"bad eviction of {ev.model_id}")
            resident = None
        else:
            raise AssertionError(f"unknown action {ev.action!r}")


# -- training ---------------------------------------------------------------------

@dataclass
class DistillSequence:
    tokens: np.ndarray
    loss_mask: np.ndarray
    source: str = REFERENCE


def _pad(seqs: Sequence[DistillSequence]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s.tokens) for s in seqs)
    toks = np.full((len(seqs), T), tok.PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float64)
    for i, s in enumerate(seqs):
        toks[i, :len(s.tokens)] = s.tokens
        mask[i, :len(s.tokens)] = s.loss_mask
    return toks, mask


def teacher_targets(teacher: TinyLM, tokens: np.ndarray, mode: str = "full",
                    k: int | None = None) -> DistillTarget:
    with no_grad():
        logits = teacher.forward(tokens).data
    return DistillTarget.from_logits(logits, mode, k)


def distill_loss(student: TinyLM, target: DistillTarget, tokens: np.ndarray,
                 mask: np.ndarray) -> Tensor:
    """Per-sequence mean KL over response positions, averaged over the batch.

    Position ``t`` (predicting token ``t+1``) counts when ``mask[t+1] == 1``.
    """
    kl = forward_kl(target, student.forward(tokens))
    pos_mask = np.zeros_like(mask)
    pos_mask[:, :-1] = mask[:, 1:]
    counts = pos_mask.sum(axis=1)
    weights = np.where(counts[:, None] > 0, pos_mask / np.maximum(counts, 1)[:, None], 0.0)
    return ops.sum(kl * weights) * (1.0 / len(tokens))


class OnPolicyDistiller:
    """Student/teacher pair driven by :meth:`step`.

    ``prompts`` feed on-policy generation; ``reference`` is the SFT-style
    corpus used for the off-policy branch.
    """

    def __init__(self, student: TinyLM, teacher: TinyLM, config: DistillConfig,
                 reference: Sequence[InstructionExample], prompts: Sequence[np.ndarray] | None = None,
                 residency: ResidencyManager | None = None, optimizer: AdamW | None = None):
        if student.config.vocab_size != teacher.config.vocab_size:
            raise ValueError("student and teacher must share a vocabulary "
                             f"({student.config.vocab_size} != {teacher.config.vocab_size})")
        if config.mode == "topk" and config.k > student.config.vocab_size:
            raise ValueError("k larger than the vocabulary")
        self.student = student
        self.teacher = teacher
        self.config = config
        limit = min(student.config.context_len, teacher.config.context_len)
        rendered = [render(ex, max_len=limit) for ex in reference]
        self.reference = [DistillSequence(r.tokens, r.loss_mask) for r in rendered if r is not None]
        if not self.reference:
            raise ValueError("reference corpus is empty after rendering")
        self.prompts = list(prompts) if prompts is not None else [
            render_prompt(ex.user, ex.system) for ex in reference]
        self.residency = residency or ResidencyManager()
        self.residency.register("student")
        self.residency.register("teacher")
        self.optimizer = optimizer or AdamW(student.parameters(), lr=config.learning_rate,
                                            weight_decay=config.weight_decay)
        self.source_rng = np.random.default_rng([config.seed, 0])
        self.data_rng = np.random.default_rng([config.seed, 1])
        self.step_count = 0
        self.sampling = SamplingParams(temperature=config.temperature, top_p=config.top_p,
                                       max_new_tokens=config.max_completion)

    def total_steps(self) -> int:
        if self.config.steps is not None:
            return self.config.steps
        return self.config.epochs * math.ceil(len(self.reference) / self.config.batch_size)

    def _on_policy_batch(self) -> list[DistillSequence]:
        n = self.config.batch_size
        idx = self.data_rng.integers(0, len(self.prompts), size=n)
        prompts = [self.prompts[int(i)] for i in idx]
        limit = min(self.student.config.context_len, self.teacher.config.context_len)
        params = SamplingParams(self.sampling.temperature, self.sampling.top_p,
                                min(self.sampling.max_new_tokens,
                                    limit - max(len(p) for p in prompts)))
        rngs = [np.random.default_rng([self.config.seed, 2, self.step_count, j]) for j in range(n)]
        with self.residency.acquire("student"):
            gens = sample_batch(self.student, prompts, params, rngs)
        out = []
        for p, g in zip(prompts, gens):
            seq = np.concatenate([p, g]) if len(g) else p
            mask = np.zeros(len(seq), dtype=np.int64)
            mask[len(p):] = 1
            out.append(DistillSequence(seq, mask, ON_POLICY))
        return out

    def _reference_batch(self) -> list[DistillSequence]:
        idx = self.data_rng.integers(0, len(self.reference), size=self.config.batch_size)
        return [self.reference[int(i)] for i in idx]

    def next_batch(self) -> tuple[str, list[DistillSequence]]:
        source = choose_source(self.config.student_fraction, self.source_rng)
        batch = self._on_policy_batch() if source == ON_POLICY else self._reference_batch()
        return source, batch

    def step(self, sequences: Sequence[DistillSequence], lr: float | None = None) -> float:
        """One student update on ``sequences``; returns the pre-update loss."""
        cfg = self.config
        tokens, mask = _pad(sequences)
        with self.residency.acquire("teacher"):
            target = teacher_targets(self.teacher, tokens, cfg.mode, cfg.k)
        with self.residency.acquire("student"):
            self.optimizer.zero_grad()
            loss = distill_loss(self.student, target, tokens, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite distillation loss {value}")
            backward(loss)
            clip_grad_norm(self.optimizer.params, cfg.grad_clip)
            self.optimizer.step(cfg.learning_rate if lr is None else lr)
        self.step_count += 1
        return value

    def train(self, run_dir=None) -> list[dict]:
        total = self.total_steps()
        writer = MetricsWriter(run_dir, "opd_metrics.jsonl")
        history = []
        for s in range(total):
            source, batch = self.next_batch()
            lr = lr_at(s, total, self.config)
            try:
                loss = self.step(batch, lr)
            except TrainingDiverged:
                dump_diagnostics(run_dir, "opd", {"step": s, "source": source,
                                                  "tokens": [b.tokens for b in batch]})
                raise
            rec = {"step": s, "loss": loss, "source": source, "lr": lr}
            writer.write(rec)
            history.append(rec)
        writer.close()
        return history


def mean_teacher_kl(student: TinyLM, teacher: TinyLM,
                    examples: Sequence[InstructionExample], batch_size: int = 32) -> float:
    """Held-out full-support forward KL averaged over response positions."""
    limit = min(student.config.context_len, teacher.config.context_len)
    seqs = [r for r in (render(ex, max_len=limit) for ex in examples) if r is not None]
    total, count = 0.0, 0.0
    for i in range(0, len(seqs), batch_size):
        chunk = [DistillSequence(r.tokens, r.loss_mask) for r in seqs[i:i + batch_size]]
        tokens, mask = _pad(chunk)
        target = teacher_targets(teacher, tokens)
        with no_grad():
            kl = forward_kl(target, student.forward(tokens)).data
        pos_mask = np.zeros_like(mask)
        pos_mask[:, :-1] = mask[:, 1:]
        total += float((kl * pos_mask).sum())
        count += float(pos_mask.sum())
    return total / max(count, 1.0)
