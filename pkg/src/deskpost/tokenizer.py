"""Byte-level tokenizer with a handful of reserved control ids.

Text bytes map to their own value, so the vocabulary stays at 256. The low
control bytes 0x00-0x07 never occur in the corpora we handle and are taken
over by sentinel tokens; if they do appear in input text they are replaced by
``?`` before encoding.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

VOCAB_SIZE = 256
PAD = 0
EOS = 1
SYS = 2
USR = 3
ASST = 4
TOOL = 5
NUM_RESERVED = 8

SPECIAL_NAMES = {PAD: "<pad>", EOS: "<eos>", SYS: "<sys>", USR: "<usr>",
                 ASST: "<asst>", TOOL: "<tool>"}
ROLE_TOKENS = {"system": SYS, "user": USR, "assistant": ASST, "tool": TOOL}

_REPLACEMENT = ord("?")


def encode(text: str) -> list[int]:
    return [b if b >= NUM_RESERVED else _REPLACEMENT for b in text.encode("utf-8")]


def encode_array(text: str) -> np.ndarray:
    return np.asarray(encode(text), dtype=np.int64)


def decode(ids: Iterable[int], show_special: bool = False) -> str:
    """Bytes back to text; control ids and ids past the byte range are dropped or named."""
    out = bytearray()
    pieces: list[str] = []
    for i in ids:
        i = int(i)
        if i < NUM_RESERVED or i >= VOCAB_SIZE:
            if show_special:
                pieces.append(out.decode("utf-8", errors="replace"))
                out.clear()
                pieces.append(SPECIAL_NAMES.get(i, f"<r{i}>"))
            continue
        out.append(i)
    pieces.append(out.decode("utf-8", errors="replace"))
    return "".join(pieces)
