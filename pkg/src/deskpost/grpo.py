"""Group-relative policy optimisation with decoupled clipping and in-domain CE."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tokenizer as tok
from .autodiff import AdamW, Tensor, backward, clip_grad_norm, no_grad, ops
from .metrics import MetricsWriter
from .model import TinyLM
from .sft import TrainingDiverged, dump_diagnostics

log = logging.getLogger(__name__)

ADV_EPS = 1e-6
DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class ClipConfig:
    clip_low: float = 0.20
    clip_high: float = 0.24

    def __post_init__(self):
        if not 0.0 < self.clip_low <= self.clip_high < 1.0:
            raise ValueError("need 0 < clip_low <= clip_high < 1")


@dataclass(frozen=True)
class InKConfig:
    rho: float = 0.6
    ce_weight: float = 0.1
    ce_batch: int = 64
    ce_update: str = "per_minibatch"
    ce_pack_len: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must be in [0, 1]")
        if self.ce_weight < 0:
            raise ValueError("ce_weight must be nonnegative")
        if self.ce_batch < 1:
            raise ValueError("ce_batch must be >= 1")
        if self.ce_update != "per_minibatch":
            raise ValueError("only per_minibatch CE updates are supported")
        if self.ce_pack_len is not None and self.ce_pack_len < 2:
            raise ValueError("ce_pack_len must be >= 2")


def compute_advantages(rewards) -> np.ndarray:
    """``(r - mean) / max(std, 1e-6)`` with population std; flat groups give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    std = r.std()
    if std < DEGENERATE_STD:
        return np.zeros_like(r)
    adv = (r - r.mean()) / max(std, ADV_EPS)
    return adv - adv.mean()


# -- rollouts ----------------------------------------------------------------------

@dataclass
class Rollout:
    """One sampled sequence.

    ``tokens`` is prompt plus response; ``mask[t] == 1`` marks tokens the
    policy produced and that receive gradient; ``behavior_logprobs[t]`` is the
    sampling-time log-probability of ``tokens[t]`` (0 at t = 0).
    """

    tokens: np.ndarray
    mask: np.ndarray
    reward: float = 0.0
    advantage: float = 0.0
    behavior_logprobs: np.ndarray | None = None
    response_len: int = 0
    truncated: bool = False
    flagged: bool = False
    info: dict = field(default_factory=dict)


@dataclass
class RolloutGroup:
    prompt: np.ndarray
    rollouts: list[Rollout]

    def __post_init__(self):
        if len(self.rollouts) < 2:
            raise ValueError("a group needs K >= 2 rollouts")

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.advantage for r in self.rollouts])

    def assign_advantages(self) -> None:
        for r, a in zip(self.rollouts, compute_advantages(self.rewards)):
            r.advantage = float(a)


def pad_batch(rollouts: Sequence[Rollout]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = max(len(r.tokens) for r in rollouts)
    toks = np.full((len(rollouts), T), tok.PAD, dtype=np.int64)
    mask = np.zeros((len(rollouts), T))
    old = np.zeros((len(rollouts), T))
    for i, r in enumerate(rollouts):
        n = len(r.tokens)
        toks[i, :n] = r.tokens
        mask[i, :n] = r.mask
        if r.behavior_logprobs is not None:
            old[i, :n] = r.behavior_logprobs
    return toks, mask, old


def token_log_probs(model: TinyLM, tokens: np.ndarray) -> Tensor:
    """``out[b, t]`` = log-prob of ``tokens[b, t]``; column 0 is zero."""
    logp = ops.log_softmax(model.forward(tokens[:, :-1]), axis=-1)
    picked = ops.gather(logp, tokens[:, 1:, None], axis=-1).reshape(tokens.shape[0], -1)
    zeros = Tensor(np.zeros((tokens.shape[0], 1), dtype=picked.data.dtype))
    return ops.concat([zeros, picked], axis=1)


def record_behavior_logprobs(model: TinyLM, rollouts: Sequence[Rollout],
                             batch_size: int = 64) -> None:
    """Freeze sampling-time log-probabilities onto each rollout."""
    for i in range(0, len(rollouts), batch_size):
        chunk = rollouts[i:i + batch_size]
        toks, _, _ = pad_batch(chunk)
        with no_grad():
            lp = token_log_probs(model, toks).data
        for j, r in enumerate(chunk):
            r.behavior_logprobs = lp[j, :len(r.tokens)].copy()
            r.behavior_logprobs.setflags(write=False)


def clipped_surrogate(logp: Tensor, old_logp: np.ndarray, advantages: np.ndarray,
                      mask: np.ndarray, clip: ClipConfig) -> tuple[Tensor, dict]:
    """Token-mean of ``-min(ratio * a, clip(ratio) * a)`` over masked tokens."""
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1, *([1] * (logp.ndim - 1)))
    ratio = ops.exp(logp - old_logp)
    live = mask > 0
    if not np.all(np.isfinite(ratio.data[live])):
        raise TrainingDiverged("NaN/Inf importance ratio")
    surr1 = ratio * adv
    surr2 = ops.clip(ratio, 1.0 - clip.clip_low, 1.0 + clip.clip_high) * adv
    contrib = ops.minimum(surr1, surr2)
    n = max(float(mask.sum()), 1.0)
    loss = -(ops.sum(contrib * mask) * (1.0 / n))
    r = ratio.data
    adv_b = np.broadcast_to(adv, r.shape)
    stats = {
        "clip_frac_high": float(((r > 1 + clip.clip_high) & (adv_b > 0) & live).sum() / n),
        "clip_frac_low": float(((r < 1 - clip.clip_low) & (adv_b < 0) & live).sum() / n),
    }
    return loss, stats


def grpo_objective(rollouts: Sequence[Rollout], model: TinyLM,
                   clip: ClipConfig = ClipConfig()) -> tuple[Tensor, dict]:
    """Decoupled-clip surrogate over a minibatch, averaged over all live tokens.

    There is no KL penalty toward a reference policy.
    """
    if any(r.behavior_logprobs is None for r in rollouts):
        raise ValueError("behavior log-probs must be recorded at sampling time")
    toks, mask, old = pad_batch(rollouts)
    logp = token_log_probs(model, toks)
    adv = np.array([r.advantage for r in rollouts])
    return clipped_surrogate(logp, old, adv, mask, clip)


# -- in-domain cross-entropy ----------------------------------------------------------

def encode_documents(texts: Sequence[str], max_len: int, bos: bool = False) -> list[np.ndarray]:
    """Raw text plus EOS, no chat template, cut to ``max_len`` tokens.

    ``bos=True`` also opens each document with the EOS id, the usual
    document separator in a concatenated pretraining stream.
    """
    docs = []
    head = [tok.EOS] if bos else []
    for t in texts:
        ids = head + tok.encode(t)[: max_len - 1 - len(head)] + [tok.EOS]
        docs.append(np.asarray(ids, dtype=np.int64))
    return docs


def ce_loss(model: TinyLM, docs: Sequence[np.ndarray], pack_len: int | None = None) -> Tensor:
    """Token-mean next-token cross-entropy over a batch of raw documents.

    With ``pack_len`` the documents are concatenated into one stream and cut
    into rows of ``pack_len`` tokens, positions running on across document
    boundaries as in ordinary language-model pretraining. Otherwise each
    document is its own row.
    """
    if pack_len is not None:
        stream = np.concatenate(docs)
        docs = [stream[i:i + pack_len] for i in range(0, len(stream), pack_len)]
        docs = [d for d in docs if len(d) >= 2]
    T = max(len(d) for d in docs)
    toks = np.full((len(docs), T), tok.PAD, dtype=np.int64)
    mask = np.zeros((len(docs), T - 1))
    for i, d in enumerate(docs):
        toks[i, :len(d)] = d
        mask[i, :len(d) - 1] = 1
    return ops.cross_entropy(model.forward(toks[:, :-1]), toks[:, 1:], mask)


def _update(model: TinyLM, optimizer: AdamW, loss: Tensor, lr: float,
            grad_clip: float | None) -> None:
    backward(loss)
    clip_grad_norm(optimizer.params, grad_clip)
    optimizer.step(lr)


def grpo_step(model: TinyLM, optimizer: AdamW, minibatch: Sequence[Rollout],
              clip: ClipConfig, lr: float, grad_clip: float | None = 1.0) -> dict:
    optimizer.zero_grad()
    loss, stats = grpo_objective(minibatch, model, clip)
    _update(model, optimizer, loss, lr, grad_clip)
    return {"loss": float(loss.data), "ce_active": 0, "ce_loss": None, **stats}


def ink_step(model: TinyLM, optimizer: AdamW, minibatch: Sequence[Rollout],
             ce_corpus: Sequence[np.ndarray], config: InKConfig, rng: np.random.Generator,
             clip: ClipConfig, lr: float, grad_clip: float | None = 1.0) -> dict:
    """GRPO loss plus, with probability rho, ``ce_weight`` times an in-domain CE loss.

    Both terms go into a single parameter update. ``rng`` is used only for the
    Bernoulli gate and for picking CE documents (uniform, with replacement).
    """
    optimizer.zero_grad()
    loss, stats = grpo_objective(minibatch, model, clip)
    active = bool(rng.random() < config.rho)
    ce_value = None
    if active:
        idx = rng.integers(0, len(ce_corpus), size=config.ce_batch)
        ce = ce_loss(model, [ce_corpus[int(i)] for i in idx], config.ce_pack_len)
        ce_value = float(ce.data)
        loss = loss + ce * config.ce_weight
    _update(model, optimizer, loss, lr, grad_clip)
    return {"loss": float(loss.data), "ce_active": int(active), "ce_loss": ce_value, **stats}


# -- training loop ------------------------------------------------------------------

class RolloutSource(Protocol):
    """Produces ``K`` scored rollouts for one task item."""

    def collect(self, model: TinyLM, items: Sequence, group_size: int,
                rngs: Sequence[Sequence[np.random.Generator]]) -> list[list[Rollout]]:
        ...


@dataclass(frozen=True)
class RLConfig:
    steps: int = 100
    prompts_per_step: int = 4
    group_size: int = 8
    epochs_per_step: int = 1
    minibatches: int = 1
    learning_rate: float = 1e-6
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    clip: ClipConfig = ClipConfig()
    ink: InKConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.minibatches < 1 or self.epochs_per_step < 1:
            raise ValueError("minibatches and epochs_per_step must be >= 1")


class GRPOTrainer:
    """Collect groups of rollouts, then run E epochs of M minibatch updates.

    Prompts are visited in a freshly shuffled order on every pass over the
    task set. RNG streams: rollouts derive from (seed, step, item, sample),
    minibatch shuffling and the CE gate each have their own generator, so
    the CE gate never perturbs the rollout stream.
    """

    def __init__(self, model: TinyLM, source: RolloutSource, items: Sequence,
                 config: RLConfig, ce_corpus: Sequence[np.ndarray] | None = None,
                 optimizer: AdamW | None = None):
        if config.ink is not None and config.ink.rho > 0 and not ce_corpus:
            raise ValueError("InK-GRPO with rho > 0 needs a nonempty CE corpus")
        if not items:
            raise ValueError("empty task set")
        self.model = model
        self.source = source
        self.items = list(items)
        self.config = config
        self.ce_corpus = list(ce_corpus or [])
        self.optimizer = optimizer or AdamW(model.parameters(), lr=config.learning_rate,
                                            weight_decay=config.weight_decay)
        self.order_rng = np.random.default_rng([config.seed, 10])
        self.shuffle_rng = np.random.default_rng([config.seed, 11])
        self.ce_rng = np.random.default_rng([config.seed, 12])
        self._queue: list[int] = []
        self.step_count = 0
        self.audit_unmasked_tool_tokens = 0

    def _next_items(self) -> list[int]:
        out = []
        while len(out) < self.config.prompts_per_step:
            if not self._queue:
                self._queue = [int(i) for i in self.order_rng.permutation(len(self.items))]
            out.append(self._queue.pop(0))
        return out

    def collect(self) -> list[RolloutGroup]:
        cfg = self.config
        idx = self._next_items()
        rngs = [[np.random.default_rng([cfg.seed, self.step_count, i, k])
                 for k in range(cfg.group_size)] for i in idx]
        batches = self.source.collect(self.model, [self.items[i] for i in idx],
                                      cfg.group_size, rngs)
        groups = []
        for rollouts in batches:
            if len(rollouts) != cfg.group_size:
                raise RuntimeError("rollout source returned the wrong group size")
            plen = int(rollouts[0].info.get("prompt_len", 0))
            groups.append(RolloutGroup(rollouts[0].tokens[:plen], rollouts))
        flat = [r for g in groups for r in g.rollouts]
        record_behavior_logprobs(self.model, flat)
        for g in groups:
            g.assign_advantages()
        self.audit_unmasked_tool_tokens += sum(int(r.info.get("unmasked_tool_tokens", 0))
                                               for r in flat)
        return groups

    def step(self, run_dir=None) -> dict:
        cfg = self.config
        groups = self.collect()
        buffer = [r for g in groups for r in g.rollouts]
        rewards = np.array([r.reward for r in buffer])
        outs = []
        for _ in range(cfg.epochs_per_step):
            order = self.shuffle_rng.permutation(len(buffer))
            for chunk in np.array_split(order, cfg.minibatches):
                if len(chunk) == 0:
                    continue
                mb = [buffer[int(i)] for i in chunk]
                try:
                    if cfg.ink is None:
                        out = grpo_step(self.model, self.optimizer, mb, cfg.clip,
                                        cfg.learning_rate, cfg.grad_clip)
                    else:
                        out = ink_step(self.model, self.optimizer, mb, self.ce_corpus, cfg.ink,
                                       self.ce_rng, cfg.clip, cfg.learning_rate, cfg.grad_clip)
                except TrainingDiverged:
                    dump_diagnostics(run_dir, "grpo", {
                        "step": self.step_count, "tokens": [r.tokens for r in mb],
                        "behavior_logprobs": [r.behavior_logprobs for r in mb]})
                    raise
                outs.append(out)
        rec = {
            "step": self.step_count,
            "mean_reward": float(rewards.mean()),
            "std_reward": float(rewards.std()),
            "ce_active": float(np.mean([o["ce_active"] for o in outs])),
            "mean_len": float(np.mean([r.response_len for r in buffer])),
            "clip_frac_high": float(np.mean([o["clip_frac_high"] for o in outs])),
            "clip_frac_low": float(np.mean([o["clip_frac_low"] for o in outs])),
            "loss": float(np.mean([o["loss"] for o in outs])),
            "rollouts": len(buffer),
            "flagged": int(sum(r.flagged for r in buffer)),
        }
        self.step_count += 1
        return rec

    def train(self, run_dir=None, callback: Callable[[dict], None] | None = None) -> list[dict]:
        writer = MetricsWriter(run_dir, "rl_metrics.jsonl")
        history = []
        for _ in range(self.config.steps):
            rec = self.step(run_dir)
            writer.write(rec)
            history.append(rec)
            if callback is not None:
                callback(rec)
        writer.close()
        return history


def params_checksum(model: TinyLM) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()
