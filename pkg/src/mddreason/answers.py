"""Answer extraction and the think-then-answer output grammar."""
from __future__ import annotations

import re

UNPARSEABLE = "unparseable"
ANSWER_TAG = re.compile(r"<answer>\s*(MDD|HC)\s*</answer>")
FORMAT_GRAMMAR = re.compile(r"^\s*<think>.*?</think>\s*<answer>\s*(MDD|HC)\s*</answer>\s*$", re.DOTALL)
_KEYWORDS = (
    (re.compile(r"\bMDD\b|\bmajor depressive disorder\b", re.IGNORECASE), "MDD"),
    (re.compile(r"\bHC\b|\bhealthy control\b", re.IGNORECASE), "HC"),
)


def extract_answer(text: object) -> str:
    """Return MDD, HC or ``unparseable``. Never raises.

    The last ``<answer>`` tag wins. Without a tag, the last non-empty line is
    searched for exactly one of the two class keywords.
    """
    if not isinstance(text, str):
        return UNPARSEABLE
    tags = ANSWER_TAG.findall(text)
    if tags:
        return tags[-1]
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        return UNPARSEABLE
    hits = {label for rx, label in _KEYWORDS if rx.search(lines[-1])}
    return hits.pop() if len(hits) == 1 else UNPARSEABLE


def is_well_formed(text: str) -> bool:
    return FORMAT_GRAMMAR.match(text) is not None
