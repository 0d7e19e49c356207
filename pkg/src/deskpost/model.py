"""Tiny decoder-only transformer plus sampling helpers."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tokenizer as tok
from .autodiff import Tensor, checkpoint, no_grad, ops


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    context_len: int = 256
    seed: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @classmethod
    def student(cls, **kw) -> "ModelConfig":
        return cls(**{"layers": 4, "model_dim": 128, "heads": 4, "context_len": 256, **kw})

    @classmethod
    def teacher(cls, **kw) -> "ModelConfig":
        return cls(**{"layers": 8, "model_dim": 256, "heads": 4, "context_len": 256, **kw})


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 1.0
    top_p: float = 1.0
    max_new_tokens: int = 32
    greedy: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")

    @property
    def is_greedy(self) -> bool:
        return self.greedy or self.temperature <= 1e-8


class LanguageModel(Protocol):
    """What the samplers need from a model."""

    config: ModelConfig

    def next_logits(self, tokens: np.ndarray, segments: np.ndarray | None = None) -> np.ndarray:
        ...


def segment_positions(segments: np.ndarray) -> np.ndarray:
    """Position ids that restart at 0 whenever the segment id changes along a row."""
    B, T = segments.shape
    idx = np.broadcast_to(np.arange(T), (B, T))
    starts = np.ones((B, T), dtype=bool)
    starts[:, 1:] = segments[:, 1:] != segments[:, :-1]
    start_idx = np.where(starts, idx, 0)
    start_idx = np.maximum.accumulate(start_idx, axis=1)
    return idx - start_idx


def _segment_blocks(row: np.ndarray) -> list[tuple[int, int]]:
    change = np.flatnonzero(row[1:] != row[:-1]) + 1
    edges = [0, *change.tolist(), len(row)]
    return list(zip(edges[:-1], edges[1:]))


class TinyLM:
    """Pre-LayerNorm GPT with learned absolute position embeddings."""

    def __init__(self, config: ModelConfig, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        d, V, N = config.model_dim, config.vocab_size, config.context_len
        hidden = config.mlp_ratio * d
        std = 0.02
        proj_std = std / math.sqrt(2 * config.layers)

        def normal(shape, s=std):
            return rng.normal(0.0, s, size=shape)

        shapes: dict[str, np.ndarray] = {
            "tok_emb": normal((V, d)),
            "pos_emb": normal((N, d)),
        }
        for i in range(config.layers):
            p = f"h{i}."
            shapes[p + "ln1.g"] = np.ones(d)
            shapes[p + "ln1.b"] = np.zeros(d)
            shapes[p + "attn.w_qkv"] = normal((d, 3 * d))
            shapes[p + "attn.b_qkv"] = np.zeros(3 * d)
            shapes[p + "attn.w_out"] = normal((d, d), proj_std)
            shapes[p + "attn.b_out"] = np.zeros(d)
            shapes[p + "ln2.g"] = np.ones(d)
            shapes[p + "ln2.b"] = np.zeros(d)
            shapes[p + "mlp.w_fc"] = normal((d, hidden))
            shapes[p + "mlp.b_fc"] = np.zeros(hidden)
            shapes[p + "mlp.w_proj"] = normal((hidden, d), proj_std)
            shapes[p + "mlp.b_proj"] = np.zeros(d)
        shapes["ln_f.g"] = np.ones(d)
        shapes["ln_f.b"] = np.zeros(d)
        shapes["lm_head"] = normal((d, V))
        self.params: dict[str, Tensor] = {
            name: Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
            for name, arr in shapes.items()
        }

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys differ: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=self.dtype, copy=True)
            p.zero_grad()

    def clone(self) -> "TinyLM":
        twin = TinyLM.__new__(TinyLM)
        twin.config = self.config
        twin.dtype = self.dtype
        twin.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k)
                       for k, v in self.params.items()}
        return twin

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model_config": asdict(self.config), "dtype": self.dtype.name}
        if extra_meta:
            meta.update(extra_meta)
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "TinyLM":
        state, meta = checkpoint.load(Path(path))
        model = cls(ModelConfig(**meta["model_config"]), dtype=meta.get("dtype", "float64"))
        model.load_state_dict(state)
        return model

    # -- forward --------------------------------------------------------------
    def _validate(self, tokens: np.ndarray) -> None:
        T = tokens.shape[-1]
        if T > self.config.context_len:
            raise ValueError(f"sequence length {T} exceeds context length "
                             f"{self.config.context_len}")
        if T == 0:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range for vocab size {self.config.vocab_size}")

    def forward(self, tokens, segments=None, exact_segments: bool = True) -> Tensor:
        """Logits for every position.

        ``tokens`` is ``[T]`` or ``[B, T]``. When ``segments`` is given, attention
        never crosses a segment boundary and positions restart per segment.
        With ``exact_segments`` each segment's attention is computed on its own
        block, which makes a packed row bit-identical to running each example
        separately; otherwise a vectorised mask is used.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
            if segments is not None:
                segments = np.asarray(segments)[None]
        self._validate(tokens)
        B, T = tokens.shape
        cfg = self.config
        P = self.params
        if segments is None:
            pos = np.broadcast_to(np.arange(T), (B, T))
            blocks = None
            mask = np.tril(np.ones((T, T), dtype=bool))
        else:
            segments = np.asarray(segments)
            pos = segment_positions(segments)
            if exact_segments:
                blocks = [_segment_blocks(row) for row in segments]
                mask = None
            else:
                blocks = None
                same = segments[:, :, None] == segments[:, None, :]
                mask = (same & np.tril(np.ones((T, T), dtype=bool)))[:, None]
        x = ops.embedding(P["tok_emb"], tokens) + ops.embedding(P["pos_emb"], pos)
        h_count, d = cfg.heads, cfg.model_dim
        hd = d // h_count
        scale = 1.0 / math.sqrt(hd)
        for i in range(cfg.layers):
            p = f"h{i}."
            h = ops.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            qkv = h @ P[p + "attn.w_qkv"] + P[p + "attn.b_qkv"]
            qkv = ops.transpose(qkv.reshape(B, T, 3, h_count, hd), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            if blocks is None:
                att = (q @ ops.swapaxes(k, -1, -2)) * scale
                att = ops.softmax(ops.where(mask, att, -np.inf), axis=-1)
                y = att @ v
            else:
                y = self._block_attention(q, k, v, blocks, scale)
            y = ops.transpose(y, (0, 2, 1, 3)).reshape(B, T, d)
            x = x + (y @ P[p + "attn.w_out"] + P[p + "attn.b_out"])
            h = ops.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = ops.gelu(h @ P[p + "mlp.w_fc"] + P[p + "mlp.b_fc"])
            x = x + (h @ P[p + "mlp.w_proj"] + P[p + "mlp.b_proj"])
        x = ops.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        logits = x @ P["lm_head"]
        return logits[0] if squeeze else logits

    @staticmethod
    def _block_attention(q, k, v, blocks, scale) -> Tensor:
        rows = []
        for b, row_blocks in enumerate(blocks):
            pieces = []
            for s, e in row_blocks:
                qb, kb, vb = q[b:b + 1, :, s:e], k[b:b + 1, :, s:e], v[b:b + 1, :, s:e]
                att = (qb @ ops.swapaxes(kb, -1, -2)) * scale
                causal = np.tril(np.ones((e - s, e - s), dtype=bool))
                att = ops.softmax(ops.where(causal, att, -np.inf), axis=-1)
                pieces.append(att @ vb)
            rows.append(pieces[0] if len(pieces) == 1 else ops.concat(pieces, axis=2))
        return rows[0] if len(rows) == 1 else ops.concat(rows, axis=0)

    def next_logits(self, tokens, segments=None) -> np.ndarray:
        """Last-position logits as a plain array; no graph is recorded."""
        with no_grad():
            out = self.forward(tokens, segments, exact_segments=False)
        return out.data[..., -1, :]

    def sequence_log_probs(self, tokens) -> np.ndarray:
        """Entry ``t`` is ``log p(tokens[t+1] | tokens[:t+1])``."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.shape[-1] < 2:
            raise ValueError("need at least two tokens")
        with no_grad():
            logp = ops.log_softmax(self.forward(tokens), axis=-1).data
        targets = tokens[..., 1:, None]
        return np.take_along_axis(logp[..., :-1, :], targets, axis=-1)[..., 0]


# -- sampling -----------------------------------------------------------------

def choose_token(logits: np.ndarray, params: SamplingParams, u: float) -> int:
    """Pick one token from a logit vector using a uniform draw ``u``."""
    if params.is_greedy:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / params.temperature
    z = z - z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    if params.top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        sorted_p = probs[order]
        cum = np.cumsum(sorted_p)
        keep = int(np.searchsorted(cum, params.top_p, side="left")) + 1
        keep = min(keep, len(order))
        support = order[:keep]
        p = sorted_p[:keep] / sorted_p[:keep].sum()
    else:
        support = np.arange(len(probs))
        p = probs
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return int(support[min(idx, len(support) - 1)])


def sample_batch(model: LanguageModel, prompts: Sequence[np.ndarray], params: SamplingParams,
                 rngs: Sequence[np.random.Generator] | None = None,
                 stop_tokens: Sequence[int] = (tok.EOS,)) -> list[np.ndarray]:
    """Continue every prompt; returns only the generated tokens for each.

    Each sequence draws from its own generator so results do not depend on
    batch composition. Generation stops after a stop token (which is kept) or
    ``max_new_tokens`` or when the context is full.
    """
    n = len(prompts)
    if rngs is None:
        rngs = [np.random.default_rng(i) for i in range(n)]
    seqs = [list(map(int, p)) for p in prompts]
    for p in seqs:
        if not p:
            raise ValueError("prompt must be nonempty")
    out: list[list[int]] = [[] for _ in range(n)]
    active = list(range(n))
    limit = model.config.context_len
    stop = set(stop_tokens)
    for _ in range(params.max_new_tokens):
        active = [i for i in active if len(seqs[i]) < limit]
        if not active:
            break
        lens = [len(seqs[i]) for i in active]
        T = max(lens)
        batch = np.full((len(active), T), tok.PAD, dtype=np.int64)
        segs = np.zeros((len(active), T), dtype=np.int64)
        for r, i in enumerate(active):
            L = lens[r]
            batch[r, T - L:] = seqs[i]
            segs[r, T - L:] = 1
        logits = model.next_logits(batch, segs if min(lens) != T else None)
        still = []
        for r, i in enumerate(active):
            u = 0.0 if params.is_greedy else float(rngs[i].random())
            t = choose_token(logits[r], params, u)
            seqs[i].append(t)
            out[i].append(t)
            if t not in stop:
                still.append(i)
        active = still
        if not active:
            break
    return [np.asarray(o, dtype=np.int64) for o in out]


def sample(model: LanguageModel, prompt, params: SamplingParams,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Prompt followed by its continuation."""
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise ValueError("prompt must be nonempty")
    gen = sample_batch(model, [prompt], params, [rng or np.random.default_rng(0)])[0]
    return np.concatenate([prompt, gen])
