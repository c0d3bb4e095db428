"""Vocabularies and training examples for the pointer-generator parser."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from dsp.linearize import CLOSE, is_opener, linear_tokens
from dsp.session import SEP, Session, build_encoder_input
from dsp.tree import SEPARATOR

PAD = "<pad>"
UNK = "<unk>"
EOS = "<eos>"
BOS = "<bos>"


class UncopiableToken(ValueError):
    pass


class UnknownSymbol(KeyError):
    pass


@dataclass(frozen=True)
class Example:
    source: tuple
    target: tuple  # linearized tree, without EOS
    session_id: str = ""
    turn: int = 0


def make_examples(sessions: Iterable[Session], include_assistant: bool = True) -> list[Example]:
    """One example per gold user turn, with the session history as source."""
    out = []
    for s in sessions:
        for i, turn in enumerate(s.turns):
            if turn.gold is None:
                continue
            enc = build_encoder_input(s, i, include_assistant=include_assistant)
            out.append(Example(enc.tokens, tuple(linear_tokens(turn.gold)), s.id, i))
    return out


class Vocabulary:
    """Ontology symbols (generation side) and source words (encoder side).

    Generation indices cover ``<eos>``, ``]``, ``;`` and every opening symbol
    seen in training. Copy indices are source positions and live in a
    separate range of the extended distribution. The decoder input table
    has one extra row, ``<bos>``, after the ontology.
    """

    def __init__(self, symbols: Sequence[str], words: Sequence[str]):
        self.symbols = list(symbols)
        self.words = list(words)
        self.sym2id = {s: i for i, s in enumerate(self.symbols)}
        self.word2id = {w: i for i, w in enumerate(self.words)}
        if len(self.sym2id) != len(self.symbols) or len(self.word2id) != len(self.words):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def build(cls, examples: Iterable[Example], min_freq: int = 1) -> "Vocabulary":
        openers = set()
        counts: Counter = Counter()
        for ex in examples:
            openers.update(t for t in ex.target if is_opener(t))
            counts.update(ex.source)
        symbols = [EOS, CLOSE, SEPARATOR] + sorted(openers)
        specials = [PAD, UNK, SEP]
        words = specials + sorted(w for w, c in counts.items() if c >= min_freq and w not in specials)
        return cls(symbols, words)

    @property
    def n_symbols(self) -> int:
        return len(self.symbols)

    @property
    def bos_id(self) -> int:
        return len(self.symbols)

    @property
    def eos_id(self) -> int:
        return self.sym2id[EOS]

    def is_symbol(self, token: str) -> bool:
        return token in self.sym2id

    def word_id(self, token: str) -> int:
        return self.word2id.get(token, self.word2id[UNK])

    def symbol_id(self, token: str) -> int:
        try:
            return self.sym2id[token]
        except KeyError:
            raise UnknownSymbol(token) from None

    def check_target(self, source: Sequence[str], target: Sequence[str]):
        present = set(source)
        for pos, tok in enumerate(target):
            if tok in self.sym2id:
                continue
            if is_opener(tok) or tok in (CLOSE, SEPARATOR):
                raise UnknownSymbol(tok)
            if tok not in present:
                raise UncopiableToken(f"target token {tok!r} at {pos} is not in the source")

    def to_json(self) -> dict:
        return {"symbols": self.symbols, "words": self.words}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["symbols"], obj["words"])
