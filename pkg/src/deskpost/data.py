"""Instruction examples, mixtures, placement augmentation, rendering and packing."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import tokenizer as tok

log = logging.getLogger(__name__)

PLACEMENT_SYSTEM_PROB = 0.5


@dataclass(frozen=True)
class InstructionExample:
    user: str
    response: str
    system: str | None = None
    constraints: tuple[str, ...] = ()
    source_tag: str = "general"

    def __post_init__(self):
        if not self.user:
            raise ValueError("user instruction must be nonempty")
        if not self.response:
            raise ValueError("response must be nonempty")
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def to_json(self) -> dict:
        d = asdict(self)
        d["constraints"] = list(self.constraints)
        return d


_FIELDS = {"user", "response", "system", "constraints", "source_tag"}


def load_jsonl(path) -> list[InstructionExample]:
    """Read one example per line; a bad line raises with its line number."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                unknown = set(obj) - _FIELDS
                if unknown:
                    raise ValueError(f"unknown fields {sorted(unknown)}")
                out.append(InstructionExample(**obj))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed example: {exc}") from exc
    return out


def write_jsonl(path, examples: Iterable[InstructionExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


# -- augmentation ---------------------------------------------------------------

def augment_placement(ex: InstructionExample, seed) -> InstructionExample:
    """Move the constraints into the system message or after the instruction.

    The choice is a fair coin seeded by ``seed``; constraint text is kept as is.
    """
    if not ex.constraints:
        return ex
    block = "\n".join(ex.constraints)
    if random.Random(seed).random() < PLACEMENT_SYSTEM_PROB:
        system = f"{ex.system}\n{block}" if ex.system else block
        return replace(ex, system=system, constraints=())
    return replace(ex, user=f"{ex.user}\n{block}", constraints=())


# -- rendering ----------------------------------------------------------------------

@dataclass(frozen=True)
class Rendered:
    tokens: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)


def render(ex: InstructionExample, max_len: int | None = None,
           skipped: Counter | None = None) -> Rendered | None:
    """``<sys> system <usr> user <asst> response <eos>``; loss only on response + eos.

    The system block is omitted when there is no system text. Constraints that
    were not placed by :func:`augment_placement` follow the instruction.
    Returns ``None`` (and bumps ``skipped["too_long"]``) past ``max_len``.
    """
    user = ex.user
    if ex.constraints:
        user = user + "\n" + "\n".join(ex.constraints)
    prompt: list[int] = []
    if ex.system:
        prompt += [tok.SYS, *tok.encode(ex.system)]
    prompt += [tok.USR, *tok.encode(user), tok.ASST]
    answer = [*tok.encode(ex.response), tok.EOS]
    if max_len is not None and len(prompt) + len(answer) > max_len:
        if skipped is not None:
            skipped["too_long"] += 1
        return None
    tokens = np.asarray(prompt + answer, dtype=np.int64)
    mask = np.zeros(len(tokens), dtype=np.int64)
    mask[len(prompt):] = 1
    return Rendered(tokens, mask)


def render_prompt(user: str, system: str | None = None) -> np.ndarray:
    """Prompt tokens up to and including the assistant marker."""
    prompt: list[int] = []
    if system:
        prompt += [tok.SYS, *tok.encode(system)]
    prompt += [tok.USR, *tok.encode(user), tok.ASST]
    return np.asarray(prompt, dtype=np.int64)


# -- packing ----------------------------------------------------------------------

@dataclass
class PackedBatch:
    """``R`` packed rows of length ``pack_len``.

    ``segments`` holds an example index per position (``-1`` for padding) and
    ``boundaries[r]`` the ``(start, end)`` span of each example in row ``r``.
    The loss mask is aligned with tokens: ``loss_mask[r, t] == 1`` means token
    ``t`` is a training target.
    """

    tokens: np.ndarray
    loss_mask: np.ndarray
    segments: np.ndarray
    boundaries: list[list[tuple[int, int]]]
    pack_len: int

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    def targets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Inputs, next-token targets, target mask and input segments.

        A target is only kept when it stays inside its own segment.
        """
        inputs = self.tokens[:, :-1]
        targets = self.tokens[:, 1:]
        same = self.segments[:, 1:] == self.segments[:, :-1]
        mask = self.loss_mask[:, 1:] * same * (self.segments[:, 1:] >= 0)
        return inputs, targets, mask, self.segments[:, :-1]


def _bins_to_batch(bins: list[list[Rendered]], pack_len: int) -> PackedBatch:
    R = len(bins)
    tokens = np.full((R, pack_len), tok.PAD, dtype=np.int64)
    mask = np.zeros((R, pack_len), dtype=np.int64)
    segs = np.full((R, pack_len), -1, dtype=np.int64)
    bounds: list[list[tuple[int, int]]] = []
    for r, items in enumerate(bins):
        pos = 0
        row_bounds = []
        for j, item in enumerate(items):
            n = len(item)
            tokens[r, pos:pos + n] = item.tokens
            mask[r, pos:pos + n] = item.loss_mask
            segs[r, pos:pos + n] = j
            row_bounds.append((pos, pos + n))
            pos += n
        bounds.append(row_bounds)
    return PackedBatch(tokens, mask, segs, bounds, pack_len)


def pack(examples: Iterable[Rendered], pack_len: int, rows_per_batch: int = 1,
         max_open: int = 16, skipped: Counter | None = None) -> Iterator[PackedBatch]:
    """First-fit greedy packing into rows of ``pack_len`` tokens.

    Each example goes into the first open row with room, otherwise a new row
    is opened; when more than ``max_open`` rows are open the oldest is
    emitted. Rows are grouped ``rows_per_batch`` at a time. Oversize examples
    are skipped and counted under ``skipped["oversize"]``.
    """
    open_bins: list[list[Rendered]] = []
    free: list[int] = []
    ready: list[list[Rendered]] = []

    def flush_ready(final: bool):
        while len(ready) >= rows_per_batch or (final and ready):
            chunk = ready[:rows_per_batch]
            del ready[:rows_per_batch]
            yield _bins_to_batch(chunk, pack_len)

    for item in examples:
        n = len(item)
        if n > pack_len:
            if skipped is not None:
                skipped["oversize"] += 1
            continue
        for i, room in enumerate(free):
            if n <= room:
                open_bins[i].append(item)
                free[i] -= n
                break
        else:
            open_bins.append([item])
            free.append(pack_len - n)
        # full rows and overflow leave the open set in order
        while open_bins and (free[0] == 0 or len(open_bins) > max_open):
            ready.append(open_bins.pop(0))
            free.pop(0)
        yield from flush_ready(False)
    ready.extend(open_bins)
    yield from flush_ready(True)


# -- mixtures ------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    counts: tuple[tuple[str, int], ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple((str(t), int(c)) for t, c in self.counts))
        for tag, count in self.counts:
            if count < 0:
                raise ValueError(f"negative count for source {tag!r}")

    @classmethod
    def from_dict(cls, counts: Mapping[str, int], seed: int = 0) -> "MixtureSpec":
        return cls(tuple(counts.items()), seed)


def build_mixture(spec: MixtureSpec, sources: Mapping[str, Sequence]) -> list:
    """Draw the requested count from each source, then shuffle the union.

    A count larger than its source falls back to sampling with replacement.
    """
    rng = np.random.default_rng(spec.seed)
    picked: list = []
    for tag, count in spec.counts:
        if tag not in sources:
            raise KeyError(f"unknown source tag {tag!r}")
        pool = sources[tag]
        if count <= len(pool):
            idx = rng.permutation(len(pool))[:count]
        else:
            log.warning("source %r has %d items, %d requested: sampling with replacement",
                        tag, len(pool), count)
            idx = rng.integers(0, len(pool), size=count)
        picked.extend(pool[int(i)] for i in idx)
    order = rng.permutation(len(picked))
    return [picked[int(i)] for i in order]
