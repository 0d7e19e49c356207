"""Format reward, overlong shaping, judge protocol and the weighted reward."""

from __future__ import annotations

import json
import logging
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Protocol, Sequence

log = logging.getLogger(__name__)

OPEN_TAG = "<thinking>"
CLOSE_TAG = "</thinking>"
ACC_WEIGHT = 0.9
FORMAT_WEIGHT = 0.1
DEFAULT_BUFFER_FRACTION = 0.25


def _asset(name: str) -> str:
    return resources.files("deskpost").joinpath("assets").joinpath(name).read_text(encoding="utf-8")


REWARD_PROMPT_TEMPLATE = _asset("judge_reward_prompt.txt")
CRITERIA_TEMPLATE = _asset("judge_criteria_prompt.txt")


# -- format -----------------------------------------------------------------------

def format_reward(response: str) -> int:
    """1 when the response is ``<thinking>...</thinking>`` followed by an answer.

    Exactly one open and one close tag, the open tag first (leading whitespace
    allowed), and non-blank text after the close tag.
    """
    if response.count(OPEN_TAG) != 1 or response.count(CLOSE_TAG) != 1:
        return 0
    body = response.lstrip()
    if not body.startswith(OPEN_TAG):
        return 0
    close = body.index(CLOSE_TAG)
    if close < len(OPEN_TAG):
        return 0
    return 1 if body[close + len(CLOSE_TAG):].strip() else 0


def final_answer(response: str) -> str:
    """Text after the last close tag, or the whole response when there is none."""
    if CLOSE_TAG in response:
        response = response.rsplit(CLOSE_TAG, 1)[1]
    return response.strip()


# -- reward arithmetic -----------------------------------------------------------------

@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_format: int
    overlong_penalty: float
    total: float
    judge_error: bool = False


def combine(r_acc: int, r_format: int, overlong_penalty: float = 0.0) -> float:
    """``0.9 * r_acc / 2 + 0.1 * r_format + overlong_penalty``.

    Evaluated as ``(9 r_acc + 2 r_format) / 20`` so every table entry is the
    correctly rounded double.
    """
    if r_acc not in (0, 1, 2):
        raise ValueError(f"r_acc must be 0, 1 or 2, got {r_acc!r}")
    if r_format not in (0, 1):
        raise ValueError(f"r_format must be 0 or 1, got {r_format!r}")
    if overlong_penalty > 0 or overlong_penalty < -1:
        raise ValueError("overlong_penalty must lie in [-1, 0]")
    return (9 * r_acc + 2 * r_format) / 20 + overlong_penalty


def overlong_shaping(response_len: int, max_len: int, buffer_len: int | None = None,
                     truncated: bool = False) -> float:
    """Zero up to ``max_len - buffer_len``, then a linear ramp down to -1 at ``max_len``."""
    if buffer_len is None:
        buffer_len = max(1, int(round(DEFAULT_BUFFER_FRACTION * max_len)))
    if not 0 < buffer_len < max_len:
        raise ValueError("need 0 < buffer_len < max_len")
    if truncated or response_len >= max_len:
        return -1.0
    soft = max_len - buffer_len
    if response_len <= soft:
        return 0.0
    return -(response_len - soft) / buffer_len


# -- judging -----------------------------------------------------------------------

@dataclass(frozen=True)
class JudgeVerdict:
    score: int
    explanation: str
    error: bool = False

    def __post_init__(self):
        if self.score not in (0, 1, 2):
            raise ValueError(f"judge score must be 0, 1 or 2, got {self.score!r}")


class Judge(Protocol):
    def __call__(self, rendered_prompt: str, *, response: str, reference: str) -> str:
        """Return the judge's raw reply text."""


def render_judge_prompt(prompt: str, response: str, reference: str) -> str:
    criteria = CRITERIA_TEMPLATE.format(ground_truth=reference)
    return REWARD_PROMPT_TEMPLATE.format(llm_judge_prompt=criteria, prompt=prompt,
                                         response_to_judge=response, ground_truth=reference)


_WS = re.compile(r"\s+")


def normalize(text: str) -> str:
    return _WS.sub(" ", text).strip().lower()


@dataclass
class ProgrammaticJudge:
    """Exact match after normalisation scores 2, a registered alias scores 1."""

    aliases: Mapping[str, Sequence[str]] = field(default_factory=dict)

    @classmethod
    def from_json(cls, path) -> "ProgrammaticJudge":
        with open(path, encoding="utf-8") as fh:
            table = json.load(fh)
        return cls({normalize(k): list(v) for k, v in table.items()})

    def score(self, response: str, reference: str) -> tuple[int, str]:
        got = normalize(final_answer(response))
        ref = normalize(reference)
        if got and got == ref:
            return 2, "matches the reference answer"
        alias_set = {normalize(a) for a in self.aliases.get(ref, ())}
        if got and got in alias_set:
            return 1, "matches a registered alias of the reference"
        return 0, "does not match the reference answer"

    def __call__(self, rendered_prompt: str, *, response: str, reference: str) -> str:
        score, why = self.score(response, reference)
        return json.dumps({"score": score, "explanation": why})


class RemoteJudge:
    """POSTs ``{"prompt": ...}`` as JSON and expects a JSON reply.

    The reply is either the verdict object itself or ``{"content": "<text>"}``.
    At most ``max_in_flight`` requests run at once.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0, max_in_flight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def __call__(self, rendered_prompt: str, *, response: str, reference: str) -> str:
        body = json.dumps({"prompt": rendered_prompt}).encode()
        req = urllib.request.Request(self.endpoint, data=body,
                                     headers={"Content-Type": "application/json"})
        with self._slots:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            return text
        if isinstance(payload, dict) and "content" in payload:
            return str(payload["content"])
        return text


def parse_verdict(text: str) -> JudgeVerdict:
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no JSON object in judge reply")
    obj = json.loads(text[start:end + 1])
    score = obj.get("score")
    if isinstance(score, bool) or not isinstance(score, (int, float)) or score != int(score):
        raise ValueError(f"bad score {score!r}")
    return JudgeVerdict(int(score), str(obj.get("explanation", "")))


def judge(prompt: str, response: str, reference: str, judge_fn: Judge | None = None) -> JudgeVerdict:
    """Render the judge prompt, ask ``judge_fn`` and parse its verdict.

    An unparseable reply is retried once; a second failure yields score 0 with
    ``error=True``.
    """
    if reference is None:
        raise ValueError("a reference answer is required")
    judge_fn = judge_fn or ProgrammaticJudge()
    rendered = render_judge_prompt(prompt, response, reference)
    last_exc: Exception | None = None
    for _ in range(2):
        try:
            reply = judge_fn(rendered, response=response, reference=reference)
            return parse_verdict(reply)
        except (ValueError, OSError) as exc:
            last_exc = exc
    log.warning("judge failed twice, scoring 0: %s", last_exc)
    return JudgeVerdict(0, f"judge error: {last_exc}", error=True)


@dataclass
class RewardFunction:
    """Scores one response.

    ``mode="weighted"`` uses accuracy and format; ``mode="accuracy"`` gives
    ``r_acc / 2`` only. The overlong penalty is added when ``max_len`` is set.
    """

    judge_fn: Judge = field(default_factory=ProgrammaticJudge)
    mode: str = "weighted"
    max_len: int | None = None
    buffer_len: int | None = None

    def __call__(self, prompt: str, response: str, reference: str, response_len: int = 0,
                 truncated: bool = False) -> RewardBreakdown:
        verdict = judge(prompt, response, reference, self.judge_fn)
        r_format = format_reward(response) if self.mode == "weighted" else 0
        penalty = 0.0
        if self.max_len is not None:
            penalty = overlong_shaping(response_len, self.max_len, self.buffer_len, truncated)
        if self.mode == "weighted":
            total = combine(verdict.score, r_format, penalty)
        else:
            total = verdict.score / 2 + penalty
        return RewardBreakdown(verdict.score, r_format, penalty, total, verdict.error)
