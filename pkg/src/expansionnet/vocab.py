"""Caption vocabulary and tokenisation."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from typing import Iterable, Sequence

from .errors import ContractError

PAD, SOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<sos>", "<eos>", "<unk>")

_PUNCT = re.compile(r"[^\w\s]")


def normalize_caption(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    """Bijection between words and ids; ids 0-3 are reserved for specials."""

    def __init__(self, words: Sequence[str], min_freq: int = 1):
        self.itos: list[str] = list(SPECIAL_TOKENS) + list(words)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ContractError("vocabulary contains duplicate tokens")
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.min_freq == other.min_freq

    def encode(self, text: str | Sequence[str], add_markers: bool = True) -> list[int]:
        words = normalize_caption(text) if isinstance(text, str) else list(text)
        ids = [self.stoi.get(w, UNK) for w in words]
        return [SOS, *ids, EOS] if add_markers else ids

    def decode_ids(self, ids: Iterable[int]) -> list[str]:
        """Words of a sequence, dropping markers and stopping at eos."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, SOS):
                continue
            out.append(self.itos[i])
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode_ids(ids))

    def to_json(self) -> dict:
        return {"min_freq": self.min_freq, "tokens": self.itos}

    @classmethod
    def from_json(cls, doc: dict) -> "Vocabulary":
        tokens = doc["tokens"]
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise ContractError(f"reserved ids 0..3 must be {SPECIAL_TOKENS}")
        return cls(tokens[4:], min_freq=doc.get("min_freq", 1))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def build_vocab(captions: Iterable[str | Sequence[str]], min_freq: int = 1) -> Vocabulary:
    """Keep words seen at least ``min_freq`` times; order by (count desc, word)."""
    counts: Counter[str] = Counter()
    n = 0
    for cap in captions:
        n += 1
        counts.update(normalize_caption(cap) if isinstance(cap, str) else cap)
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = [w for w, c in counts.items() if c >= min_freq and w not in SPECIAL_TOKENS]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept, min_freq=min_freq)
