"""Closed word-level vocabulary for the template grammar."""
from __future__ import annotations
import hashlib
from typing import Iterable, List, Sequence

from svlb.errors import VocabularyError
from svlb.scene import PALETTE, SHAPES

PAD, EOA = "<pad>", "<eoa>"
PAD_ID, EOA_ID = 0, 1
MAX_COUNT = 16

_GRAMMAR = [
    "is", "the", "left", "right", "of", "or", "above", "below", "how", "many", "are", "there",
    "a", "yes", "no", "at", "object", "objects", ";", "?",
]


def plural(shape: str) -> str:
    return shape + "s"


def default_tokens() -> List[str]:
    tokens = [PAD, EOA]
    tokens += list(PALETTE)
    tokens += list(SHAPES) + [plural(s) for s in SHAPES]
    tokens += _GRAMMAR
    tokens += [str(i) for i in range(MAX_COUNT + 1)]
    return tokens


class Vocabulary:
    def __init__(self, tokens: Sequence[str]) -> None:
        tokens = list(tokens)
        if tokens[:2] != [PAD, EOA]:
            raise VocabularyError("vocabulary must start with <pad>, <eoa>")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate vocabulary tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(default_tokens())

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return PAD_ID

    @property
    def eoa_id(self) -> int:
        return EOA_ID

    def encode(self, text: str) -> List[int]:
        ids = []
        for word in text.lower().split():
            if word not in self.index:
                raise VocabularyError(f"unknown word {word!r}")
            ids.append(self.index[word])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Words up to the first end-of-answer id; padding is skipped."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOA_ID:
                break
            if i == PAD_ID:
                continue
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside the vocabulary")
            words.append(self.tokens[i])
        return " ".join(words)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()
