"""Single-turn task items, their rollout source, greedy evaluation and synthetic corpora."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import tokenizer as tok
from .data import InstructionExample, render_prompt
from .grpo import Rollout
from .model import SamplingParams, TinyLM, sample_batch
from .rewards import JudgeVerdict, ProgrammaticJudge, RewardFunction, judge


@dataclass(frozen=True)
class TaskItem:
    prompt: str
    reference: str
    system: str | None = None
    item_id: str = ""

    def prompt_tokens(self) -> np.ndarray:
        return render_prompt(self.prompt, self.system)


class SingleTurnSource:
    """Samples K completions per prompt and scores each with ``reward_fn``.

    A reward function that raises leaves that rollout at reward 0 and flags it.
    """

    def __init__(self, reward_fn: RewardFunction | Callable, sampling: SamplingParams):
        self.reward_fn = reward_fn
        self.sampling = sampling

    def collect(self, model: TinyLM, items: Sequence[TaskItem], group_size: int,
                rngs) -> list[list[Rollout]]:
        prompts = []
        flat_rngs = []
        for item, item_rngs in zip(items, rngs):
            p = item.prompt_tokens()
            prompts.extend([p] * group_size)
            flat_rngs.extend(item_rngs)
        room = model.config.context_len - max(len(p) for p in prompts)
        params = SamplingParams(self.sampling.temperature, self.sampling.top_p,
                                min(self.sampling.max_new_tokens, room), self.sampling.greedy)
        gens = sample_batch(model, prompts, params, flat_rngs)
        groups = []
        for i, item in enumerate(items):
            group = []
            for k in range(group_size):
                j = i * group_size + k
                p, g = prompts[j], gens[j]
                truncated = len(g) == 0 or g[-1] != tok.EOS
                text = tok.decode(g)
                flagged = False
                try:
                    rb = self.reward_fn(item.prompt, text, item.reference, len(g), truncated)
                    reward = rb.total if hasattr(rb, "total") else float(rb)
                except Exception:  # reward failures must not stop training
                    reward, flagged = 0.0, True
                mask = np.concatenate([np.zeros(len(p), dtype=np.int64),
                                       np.ones(len(g), dtype=np.int64)])
                group.append(Rollout(np.concatenate([p, g]).astype(np.int64), mask, reward,
                                     response_len=len(g), truncated=truncated, flagged=flagged,
                                     info={"prompt_len": len(p), "text": text}))
            groups.append(group)
        return groups


# -- evaluation -----------------------------------------------------------------------

@dataclass
class EvalRecord:
    item_id: str
    prompt: str
    reference: str
    response: str
    score: int
    explanation: str
    error: bool = False


@dataclass
class EvalReport:
    records: list[EvalRecord]
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                "records": [asdict(r) for r in self.records]}


def greedy_responses(model: TinyLM, items: Sequence[TaskItem], max_new_tokens: int,
                     batch_size: int = 64) -> list[str]:
    params = SamplingParams(greedy=True, max_new_tokens=max_new_tokens)
    out = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        gens = sample_batch(model, [it.prompt_tokens() for it in chunk], params)
        out.extend(tok.decode(g) for g in gens)
    return out


def score_responses(items: Sequence[TaskItem], responses: Sequence[str],
                    judge_fn=None) -> EvalReport:
    """A response counts as correct when the judge gives it the full score (2)."""
    judge_fn = judge_fn or ProgrammaticJudge()
    records = []
    for i, (item, resp) in enumerate(zip(items, responses)):
        v: JudgeVerdict = judge(item.prompt, resp, item.reference, judge_fn)
        records.append(EvalRecord(item.item_id or str(i), item.prompt, item.reference, resp,
                                  v.score, v.explanation, v.error))
    correct = sum(r.score == 2 for r in records)
    return EvalReport(records, correct, len(records))


def evaluate_items(model: TinyLM, items: Sequence[TaskItem], max_new_tokens: int = 16,
                   judge_fn=None) -> EvalReport:
    if not items:
        raise ValueError("empty task set")
    return score_responses(items, greedy_responses(model, items, max_new_tokens), judge_fn)


# -- synthetic fact world ---------------------------------------------------------------

@dataclass
class FactWorld:
    """Key -> value facts stored as short documents.

    ``docs`` holds ``(doc_id, text)`` pairs with text ``"<key> = <value>"``;
    ``train_keys`` and ``test_keys`` split the keys, and values are balanced
    within each split so a constant answer scores exactly chance.
    """

    keys: list[str]
    values: dict[str, str]
    value_set: list[str]
    doc_ids: dict[str, str]
    train_keys: list[str]
    test_keys: list[str]

    @property
    def docs(self) -> list[tuple[str, str]]:
        return [(self.doc_ids[k], self.doc_text(k)) for k in self.keys]

    def doc_text(self, key: str) -> str:
        return f"{key} = {self.values[key]}"

    def question(self, key: str) -> str:
        """The document stem, so question and document line up token for token."""
        return f"{key} ="

    def items(self, keys: Sequence[str]) -> list[TaskItem]:
        return [TaskItem(self.question(k), self.values[k], item_id=k) for k in keys]

    @property
    def chance(self) -> float:
        return 1.0 / len(self.value_set)

    def to_json(self) -> dict:
        return asdict(self)


def make_fact_world(n_docs: int = 64, n_values: int = 4, train_fraction: float = 0.5,
                    key_len: int = 4, seed: int = 0) -> FactWorld:
    rng = np.random.default_rng(seed)
    letters = list(string.ascii_lowercase)
    keys: list[str] = []
    seen = set()
    while len(keys) < n_docs:
        k = "".join(rng.choice(letters, size=key_len))
        if k not in seen:
            seen.add(k)
            keys.append(k)
    value_set = [f"{c}" for c in string.ascii_uppercase[:n_values]]
    n_train = int(round(n_docs * train_fraction))
    train, test = keys[:n_train], keys[n_train:]
    values: dict[str, str] = {}
    for split in (train, test):
        vals = [value_set[i % n_values] for i in range(len(split))]
        rng.shuffle(vals)
        values.update(zip(split, vals))
    doc_ids = {k: f"d{i:02d}" for i, k in enumerate(keys)}
    return FactWorld(keys, values, value_set, doc_ids, train, test)


# -- desk-scale instruction corpora -----------------------------------------------------

def _word(rng, lo=3, hi=6) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(rng.choice(list(string.ascii_lowercase), size=n))


def synthetic_instruction_sources(seed: int = 0, scale: int = 10) -> dict[str, list[InstructionExample]]:
    """Three small sources mirroring general / tool-use / target-language data.

    Sizes keep the 200:100:40 proportions (times ``scale``/10).
    """
    rng = np.random.default_rng(seed)
    general, tool_use, target = [], [], []
    for _ in range(20 * scale):
        w = _word(rng)
        op = rng.integers(0, 3)
        if op == 0:
            general.append(InstructionExample(f"reverse {w}", w[::-1], source_tag="general"))
        elif op == 1:
            general.append(InstructionExample(f"upper {w}", w.upper(), source_tag="general"))
        else:
            general.append(InstructionExample(f"first {w}", w[0], source_tag="general",
                                              constraints=("answer with one letter",)))
    for _ in range(10 * scale):
        w = _word(rng)
        tool_use.append(InstructionExample(f"look up {w}", f"<<search: {w}>>",
                                           source_tag="tool"))
    for _ in range(4 * scale):
        w = _word(rng)
        target.append(InstructionExample(f"copy {w}", w, system="reply in kind",
                                         source_tag="target"))
    return {"general": general, "tool": tool_use, "target": target}


def copy_task_examples(n: int, seed: int = 0, lo: int = 2, hi: int = 5,
                       alphabet: str = "abcdefgh") -> list[InstructionExample]:
    """``rev <word>`` -> reversed word; small enough for tiny students to partly learn."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        k = int(rng.integers(lo, hi + 1))
        w = "".join(rng.choice(list(alphabet), size=k))
        out.append(InstructionExample(f"rev {w}", w[::-1], source_tag="general"))
    return out


def items_from_examples(examples: Sequence[InstructionExample]) -> list[TaskItem]:
    return [TaskItem(ex.user, ex.response, ex.system, item_id=str(i))
            for i, ex in enumerate(examples)]


def load_items_jsonl(path) -> list[TaskItem]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(TaskItem(obj["prompt"], obj["reference"], obj.get("system"),
                                    obj.get("item_id", str(lineno))))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed task item: {exc}") from exc
    return out


# -- single-token bandit ------------------------------------------------------------------

class BanditSource:
    """One-token responses after a fixed prompt; reward 1 for ``target`` else 0."""

    def __init__(self, target: int, prompt: Sequence[int] = (2,), temperature: float = 1.0):
        self.target = int(target)
        self.prompt = np.asarray(prompt, dtype=np.int64)
        self.sampling = SamplingParams(temperature=temperature, max_new_tokens=1)

    def collect(self, model: TinyLM, items, group_size, rngs) -> list[list[Rollout]]:
        flat = [r for group in rngs for r in group]
        gens = sample_batch(model, [self.prompt] * len(flat), self.sampling, flat, stop_tokens=())
        groups = []
        for i in range(len(items)):
            group = []
            for g in gens[i * group_size:(i + 1) * group_size]:
                toks = np.concatenate([self.prompt, g])
                mask = np.zeros(len(toks), dtype=np.int64)
                mask[len(self.prompt):] = 1
                group.append(Rollout(toks, mask, float(int(g[0]) == self.target), response_len=1,
                                     info={"prompt_len": len(self.prompt)}))
            groups.append(group)
        return groups

    def target_probability(self, model: TinyLM) -> float:
        logits = model.next_logits(self.prompt[None, :])[0]
        p = np.exp(logits - logits.max())
        return float(p[self.target] / p.sum())
