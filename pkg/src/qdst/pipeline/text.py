"""Sentence splitting, word tokenization and the vocabulary."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Dict, Iterable, List

from ..pattern import CLS_ID, PAD_ID, SEP_ID, SOS_ID, UNK_ID

ABBREVIATIONS = frozenset(
    "mr mrs ms dr prof sr jr st vs etc e.g i.e u.s u.k inc ltd co corp jan feb mar apr jun jul aug sep sept oct nov dec no fig".split()
)

_BOUNDARY = re.compile(r"[.?!]+(?=\s|$)")
_WORD = re.compile(r"[a-z0-9]+")


def split_sentences(text: str) -> List[str]:
    """Split on ``.``, ``?`` or ``!`` followed by whitespace or end of text.

    A period ending a known abbreviation ("Dr.", "e.g.") does not end a
    sentence.
    """
    sentences = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        end = m.end()
        if text[m.start()] == "." and m.end() - m.start() == 1:
            head = text[start:m.start()].split()
            last = head[-1].lower().rstrip(".") if head else ""
            if last in ABBREVIATIONS:
                continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def words(text: str) -> List[str]:
    """Lowercase, then split on anything that is not a letter or digit."""
    return _WORD.findall(text.lower())


class Vocabulary:
    """Injective token -> id map with fixed reserved ids."""

    RESERVED = {"[PAD]": PAD_ID, "[UNK]": UNK_ID, "[CLS]": CLS_ID, "[SEP]": SEP_ID, "[SOS]": SOS_ID}

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: Dict[str, int] = dict(self.RESERVED)
        self._tokens: List[str] = [t for t, _ in sorted(self.RESERVED.items(), key=lambda kv: kv[1])]
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self._ids.get(token)
        if idx is None:
            idx = len(self._tokens)
            self._ids[token] = idx
            self._tokens.append(token)
        return idx

    def get(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def to_json(self) -> str:
        return json.dumps(self._tokens[len(self.RESERVED):])

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def tokenize(text: str, vocab: Vocabulary, build_mode: bool = False) -> List[int]:
    toks = words(text)
    if build_mode:
        return [vocab.add(t) for t in toks]
    return [vocab.get(t) for t in toks]


def ids_for(tokens: Iterable[str], vocab: Vocabulary, build_mode: bool = False) -> List[int]:
    if build_mode:
        return [vocab.add(t) for t in tokens]
    return [vocab.get(t) for t in tokens]
