"""Retrieval environment with ``search`` and ``read`` tools for multi-turn rollouts.

Tool grammar: an assistant turn calls a tool by containing exactly one block

    <<search: free text query>>
    <<read: doc_id>>

Any other use of ``<<`` is malformed. A turn with no ``<<`` at all is the final
answer. Observations come back in a tool turn that never receives gradient.
"""

from __future__ import annotations

import heapq
import json
import re
import string
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tokenizer as tok
from .grpo import Rollout
from .model import SamplingParams, TinyLM, sample_batch
from .rewards import RewardFunction

TOOL_NAMES = ("search", "read")
TOP_K = 3
MAX_TURNS = 5
TOOL_RESPONSE_TOKENS = 1024
TRUNCATION_MARKER = " [truncated]"
UNKNOWN_DOC = "ERROR: unknown document"
TOOLS_UNAVAILABLE = "ERROR: tools unavailable"
MALFORMED = "ERROR: malformed tool call"
TOO_MANY_CALLS = "ERROR: one tool call per turn"

_CALL = re.compile(r"<<\s*(search|read)\s*:\s*(.*?)\s*>>", re.S)


# -- embedding and search --------------------------------------------------------------

class HashingEmbedder:
    """Character n-gram counts hashed into ``dim`` buckets (CRC32)."""

    def __init__(self, dim: int = 512, n: int = 3):
        if dim < 1 or n < 1:
            raise ValueError("dim and n must be positive")
        self.dim = dim
        self.n = n

    def counts(self, text: str) -> np.ndarray:
        if not text:
            raise ValueError("cannot embed empty text")
        padded = f" {text} ".encode("utf-8")
        out = np.zeros(self.dim, dtype=np.int64)
        n = min(self.n, len(padded))
        for i in range(len(padded) - n + 1):
            out[zlib.crc32(padded[i:i + n]) % self.dim] += 1
        return out

    def __call__(self, text: str) -> np.ndarray:
        c = self.counts(text).astype(np.float64)
        return c / np.linalg.norm(c)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


class DocumentStore:
    """Immutable set of ``(doc_id, text)`` documents with their embeddings.

    Ranking compares squared cosines as exact fractions of integer n-gram
    counts, so ties and near-ties are resolved identically to a brute-force
    check; ties go to the smaller doc_id.
    """

    def __init__(self, documents: Sequence[tuple[str, str]], embedder: HashingEmbedder | None = None):
        ids = [d for d, _ in documents]
        if len(set(ids)) != len(ids):
            raise ValueError("doc_ids must be unique")
        self.embedder = embedder or HashingEmbedder()
        self.documents = [(str(d), str(t)) for d, t in documents]
        self._text = dict(self.documents)
        self._counts = np.stack([self.embedder.counts(t) for _, t in self.documents]) \
            if self.documents else np.zeros((0, self.embedder.dim), dtype=np.int64)
        self._sq_norms = [int(x) for x in (self._counts * self._counts).sum(axis=1)]
        self.embeddings = (self._counts / np.sqrt(np.maximum(self._sq_norms, 1))[:, None]
                           if self.documents else np.zeros((0, self.embedder.dim)))

    def __len__(self) -> int:
        return len(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._text

    def text(self, doc_id: str) -> str:
        return self._text[doc_id]

    @classmethod
    def from_jsonl(cls, path, embedder: HashingEmbedder | None = None) -> "DocumentStore":
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    docs.append((str(obj["doc_id"]), str(obj["text"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed document: {exc}") from exc
        return cls(docs, embedder)


def search(store: DocumentStore, query: str, k: int = TOP_K) -> list[tuple[str, float]]:
    if len(store) == 0:
        raise ValueError("search on an empty store")
    q = store.embedder.counts(query)
    q_sq = int(q @ q)
    dots = store._counts @ q
    keyed = []
    for (doc_id, _), dot, sq in zip(store.documents, dots, store._sq_norms):
        dot = int(dot)
        keyed.append((-Fraction(dot * dot, sq), doc_id, dot, sq))
    best = heapq.nsmallest(min(k, len(store)), keyed)
    return [(doc_id, dot / float(np.sqrt(float(sq) * q_sq))) for _, doc_id, dot, sq in best]


def read(store: DocumentStore, doc_id: str, budget: int = TOOL_RESPONSE_TOKENS) -> str:
    doc_id = doc_id.strip()
    if doc_id not in store:
        return UNKNOWN_DOC
    ids = tok.encode(store.text(doc_id))
    if len(ids) <= budget:
        return store.text(doc_id)
    return tok.decode(ids[:budget]) + TRUNCATION_MARKER


# -- tool calls and episodes ------------------------------------------------------------

@dataclass(frozen=True)
class ToolCall:
    name: str
    argument: str

    def __post_init__(self):
        if self.name not in TOOL_NAMES:
            raise ValueError(f"unknown tool {self.name!r}")
        if not self.argument.strip():
            raise ValueError("tool argument must be nonempty")


def parse_tool_call(text: str) -> ToolCall | str | None:
    """``None`` for a final answer, a :class:`ToolCall`, or an error string."""
    if "<<" not in text:
        return None
    calls = list(_CALL.finditer(text))
    if len(calls) > 1:
        return TOO_MANY_CALLS
    if len(calls) == 0 or text.count("<<") != 1 or not calls[0].group(2).strip():
        return MALFORMED
    return ToolCall(calls[0].group(1), calls[0].group(2))


def format_search(results: Sequence[tuple[str, float]]) -> str:
    return "\n".join(f"{d} {s:.3f}" for d, s in results)


@dataclass
class Turn:
    role: str
    tokens: np.ndarray
    mask: np.ndarray

    def to_json(self) -> dict:
        return {"role": self.role, "text": tok.decode(self.tokens),
                "tokens": [int(t) for t in self.tokens], "mask": [int(m) for m in self.mask]}


@dataclass
class Trajectory:
    turns: list[Turn] = field(default_factory=list)
    turn_count: int = 0
    terminal: bool = False
    final_answer: str | None = None

    @property
    def tokens(self) -> np.ndarray:
        return np.concatenate([t.tokens for t in self.turns]).astype(np.int64)

    @property
    def mask(self) -> np.ndarray:
        return np.concatenate([t.mask for t in self.turns]).astype(np.int64)

    def unmasked_tool_tokens(self) -> int:
        return int(sum(t.mask.sum() for t in self.turns if t.role != "assistant"))

    def to_json(self) -> dict:
        return {"turn_count": self.turn_count, "terminal": self.terminal,
                "final_answer": self.final_answer, "turns": [t.to_json() for t in self.turns]}


def _turn(role: str, body: Sequence[int], trainable: bool = False) -> Turn:
    ids = np.asarray([tok.ROLE_TOKENS[role], *body], dtype=np.int64)
    mask = np.zeros(len(ids), dtype=np.int64)
    if trainable:
        mask[1:] = 1
    return Turn(role, ids, mask)


class Episode:
    """State machine for one question.

    Each :meth:`step` consumes one assistant turn. The episode ends on a turn
    without a tool call or once ``max_turns`` assistant turns were taken; a
    tool call on the last allowed turn is not executed. With ``max_tokens``
    observations are cut to fit, and the episode aborts when none fits.
    """

    def __init__(self, store: DocumentStore, question: str, system: str | None = None,
                 tools_enabled: bool = True, max_turns: int = MAX_TURNS,
                 tool_budget: int = TOOL_RESPONSE_TOKENS, max_tokens: int | None = None):
        if not question.strip():
            raise ValueError("question must be nonempty")
        if max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        self.store = store
        self.tools_enabled = tools_enabled
        self.max_turns = max_turns
        self.tool_budget = tool_budget
        self.max_tokens = max_tokens
        self.trajectory = Trajectory()
        if system:
            self.trajectory.turns.append(_turn("system", tok.encode(system)))
        self.trajectory.turns.append(_turn("user", tok.encode(question)))

    @property
    def terminal(self) -> bool:
        return self.trajectory.terminal

    def context(self) -> np.ndarray:
        """Tokens the policy conditions on for its next turn (ends with the assistant marker)."""
        return np.concatenate([self.trajectory.tokens, [tok.ASST]]).astype(np.int64)

    def execute(self, call: ToolCall) -> str:
        if not self.tools_enabled:
            return TOOLS_UNAVAILABLE
        if call.name == "search":
            return format_search(search(self.store, call.argument))
        return read(self.store, call.argument, self.tool_budget)

    def step(self, generated: Sequence[int]) -> str | None:
        """Record an assistant turn; returns the observation or ``None`` when terminal."""
        if self.terminal:
            raise RuntimeError("episode already terminal")
        traj = self.trajectory
        traj.turns.append(_turn("assistant", generated, trainable=True))
        traj.turn_count += 1
        text = tok.decode(generated)
        parsed = parse_tool_call(text)
        if parsed is None or traj.turn_count >= self.max_turns:
            traj.terminal = True
            traj.final_answer = text.strip()
            return None
        obs = self.execute(parsed) if isinstance(parsed, ToolCall) else parsed
        body = tok.encode(obs)[: self.tool_budget + len(TRUNCATION_MARKER)]
        if self.max_tokens is not None:
            # keep room for the tool marker, the next assistant marker and one token
            room = self.max_tokens - len(traj.tokens) - 3
            if room < 1:
                self.abort()
                return None
            body = body[:room]
        traj.turns.append(_turn("tool", body))
        return obs

    def abort(self) -> None:
        """End without a usable answer (context exhausted)."""
        self.trajectory.terminal = True
        if self.trajectory.final_answer is None:
            self.trajectory.final_answer = ""


# -- policies and rollout collection ----------------------------------------------------

class TurnPolicy(Protocol):
    def generate(self, episodes: Sequence[Episode], max_new_tokens: Sequence[int],
                 rngs: Sequence[np.random.Generator]) -> list[np.ndarray]:
        ...


@dataclass
class ModelPolicy:
    model: TinyLM
    sampling: SamplingParams

    def generate(self, episodes, max_new_tokens, rngs):
        # all episodes share one cap so a batch is a single sample_batch call
        cap = min(min(max_new_tokens), self.sampling.max_new_tokens)
        params = SamplingParams(self.sampling.temperature, self.sampling.top_p, cap,
                                self.sampling.greedy)
        return sample_batch(self.model, [e.context() for e in episodes], params, rngs)


@dataclass
class ScriptedPolicy:
    """Deterministic policy from ``script(episode) -> text``; EOS is appended."""

    script: Callable[[Episode], str]

    def generate(self, episodes, max_new_tokens, rngs):
        out = []
        for e, cap in zip(episodes, max_new_tokens):
            ids = [*tok.encode(self.script(e)), tok.EOS][:cap]
            out.append(np.asarray(ids, dtype=np.int64))
        return out


def run_episodes(policy: TurnPolicy, episodes: Sequence[Episode], context_len: int,
                 rngs: Sequence[np.random.Generator] | None = None) -> list[Trajectory]:
    """Advance all episodes in lockstep until every one is terminal."""
    if rngs is None:
        rngs = [np.random.default_rng(i) for i in range(len(episodes))]
    while True:
        live = []
        for i, e in enumerate(episodes):
            if e.terminal:
                continue
            if len(e.context()) + 1 > context_len:
                e.abort()
            else:
                live.append(i)
        if not live:
            break
        caps = [context_len - len(episodes[i].context()) for i in live]
        gens = policy.generate([episodes[i] for i in live], caps, [rngs[i] for i in live])
        for i, g in zip(live, gens):
            episodes[i].step(g)
    return [e.trajectory for e in episodes]


def collect_trajectory(policy: TurnPolicy, store: DocumentStore, question: str,
                       context_len: int = 4096, rng: np.random.Generator | None = None,
                       **episode_kw) -> tuple[Trajectory, str]:
    ep = Episode(store, question, **episode_kw)
    traj = run_episodes(policy, [ep], context_len, [rng or np.random.default_rng(0)])[0]
    return traj, traj.final_answer or ""


def export_traces(path, trajectories: Sequence[Trajectory]) -> None:
    Path(path).write_text(json.dumps([t.to_json() for t in trajectories], indent=1))


# -- retrieval task -----------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalItem:
    question: str
    reference: str
    store: DocumentStore
    key: str = ""


def make_retrieval_items(n: int, n_docs: int = 16, key_len: int = 4, value_len: int = 2,
                         seed: int = 0) -> list[RetrievalItem]:
    """Each item gets its own store of fresh random ``key = VALUE`` documents.

    Values are drawn uniformly per item, so without reading the store an agent
    can do no better than guessing.
    """
    rng = np.random.default_rng(seed)
    lower, upper = list(string.ascii_lowercase), list(string.ascii_uppercase)
    items = []
    for _ in range(n):
        keys: list[str] = []
        while len(keys) < n_docs:
            k = "".join(rng.choice(lower, size=key_len))
            if k not in keys:
                keys.append(k)
        ids = [f"d{int(x):02d}" for x in rng.choice(100, size=n_docs, replace=False)]
        vals = ["".join(rng.choice(upper, size=value_len)) for _ in keys]
        store = DocumentStore([(i, f"{k} = {v}") for i, k, v in zip(ids, keys, vals)])
        target = int(rng.integers(0, n_docs))
        items.append(RetrievalItem(f"{keys[target]}?", vals[target], store, keys[target]))
    return items


def oracle_script(item_key: Callable[[Episode], str]) -> Callable[[Episode], str]:
    """search(key) -> read(top hit) -> answer with the value after ``=``."""

    def script(ep: Episode) -> str:
        turns = [t for t in ep.trajectory.turns if t.role == "tool"]
        if not turns:
            return f"<<search: {item_key(ep)}>>"
        last = tok.decode(turns[-1].tokens)
        if len(turns) == 1:
            return f"<<read: {last.split()[0]}>>"
        return last.split("=", 1)[-1].strip()

    return script


def oracle_demonstrations(items: Sequence[RetrievalItem]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Oracle search -> read -> answer trajectories as ``(tokens, mask)`` for warm-starting."""
    keys: dict[int, str] = {}
    eps = []
    for it in items:
        ep = Episode(it.store, it.question)
        keys[id(ep)] = it.key or it.question.rstrip("?")
        eps.append(ep)
    trajs = run_episodes(ScriptedPolicy(oracle_script(lambda e: keys[id(e)])), eps,
                         context_len=1 << 20)
    return [(t.tokens, t.mask) for t in trajs]


class AgenticSource:
    """Rollout source over :class:`RetrievalItem`; reward is accuracy only."""

    def __init__(self, sampling: SamplingParams, tools_enabled: bool = True,
                 reward_fn: RewardFunction | None = None, max_turns: int = MAX_TURNS,
                 tool_budget: int = TOOL_RESPONSE_TOKENS):
        self.sampling = sampling
        self.tools_enabled = tools_enabled
        self.reward_fn = reward_fn or RewardFunction(mode="accuracy")
        self.max_turns = max_turns
        self.tool_budget = tool_budget
        self.trajectories: list[Trajectory] = []

    def episodes(self, items: Sequence[RetrievalItem], group_size: int,
                 max_tokens: int | None = None) -> list[Episode]:
        return [Episode(it.store, it.question, tools_enabled=self.tools_enabled,
                        max_turns=self.max_turns, tool_budget=self.tool_budget,
                        max_tokens=max_tokens)
                for it in items for _ in range(group_size)]

    def collect(self, model: TinyLM, items, group_size, rngs) -> list[list[Rollout]]:
        eps = self.episodes(items, group_size, model.config.context_len)
        flat_rngs = [r for group in rngs for r in group]
        trajs = run_episodes(ModelPolicy(model, self.sampling), eps, model.config.context_len,
                             flat_rngs)
        groups = []
        for i, item in enumerate(items):
            group = []
            for traj in trajs[i * group_size:(i + 1) * group_size]:
                answer = traj.final_answer or ""
                flagged = False
                try:
                    reward = self.reward_fn(item.question, answer, item.reference).total
                except Exception:  # a failing judge must not stop training
                    reward, flagged = 0.0, True
                plen = len(traj.turns[0].tokens) + (len(traj.turns[1].tokens)
                                                    if traj.turns[0].role == "system" else 0)
                mask = traj.mask
                group.append(Rollout(traj.tokens, mask, reward,
                                     response_len=int(mask.sum()), flagged=flagged,
                                     truncated=not traj.final_answer,
                                     info={"prompt_len": plen, "turns": traj.turn_count,
                                           "unmasked_tool_tokens": traj.unmasked_tool_tokens()}))
                self.trajectories.append(traj)
            groups.append(group)
        return groups


def evaluate_agent(model: TinyLM, items: Sequence[RetrievalItem], tools_enabled: bool = True,
                   max_new_tokens: int = 24, reward_fn: RewardFunction | None = None,
                   max_turns: int = MAX_TURNS) -> tuple[float, list[Trajectory], list[int]]:
    """Greedy episodes; returns (fraction judged fully correct, trajectories, judge scores)."""
    reward_fn = reward_fn or RewardFunction(mode="accuracy")
    eps = [Episode(it.store, it.question, tools_enabled=tools_enabled, max_turns=max_turns,
                   max_tokens=model.config.context_len) for it in items]
    policy = ModelPolicy(model, SamplingParams(greedy=True, max_new_tokens=max_new_tokens))
    trajs = run_episodes(policy, eps, model.config.context_len)
    scores = [reward_fn(it.question, t.final_answer or "", it.reference).r_acc
              for it, t in zip(items, trajs)]
    return sum(s == 2 for s in scores) / len(items), trajs, scores
