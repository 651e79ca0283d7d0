"""Word-level tokenizer shared by the toy policy and token statistics."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

TOKENIZER_VERSION = "words-v1"
_TOKEN = re.compile(r"<[^<>\s]+>|\w+(?:[-'/:.]\w+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Split into words, tag tokens like ``<answer>`` and single punctuation marks."""
    return _TOKEN.findall(text)


def count_tokens(text: str) -> int:
    return len(tokenize(text))


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], specials: Sequence[str] = ()) -> Vocab:
        seen = dict.fromkeys(specials)
        for text in texts:
            seen.update(dict.fromkeys(tokenize(text)))
        return cls(list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = tokenize(text) if isinstance(text, str) else text
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise ValueError(f"token {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)
