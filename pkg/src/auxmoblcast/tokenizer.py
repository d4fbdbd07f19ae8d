"""Word-level tokenizer with whole-numeral tokens and reserved special ids."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import EmptyCorpusError, IdOutOfRangeError

PAD, UNK, CLS, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[BOS]", "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, CLS, BOS, EOS)
PAD_ID, UNK_ID, CLS_ID, BOS_ID, EOS_ID = range(5)
DEFAULT_MAX_LEN = 128

_SPLIT_CHARS = ",.()-"
_NO_SPACE_BEFORE = {",", ".", ")"}
_NO_SPACE_AFTER = {"("}


class TruncationWarning(UserWarning):
    pass


def tokenize(text: str) -> list[str]:
    """Split on whitespace, then peel ``, . ( ) -`` off both ends of each word."""
    tokens: list[str] = []
    for word in text.split():
        lead: list[str] = []
        while word and word[0] in _SPLIT_CHARS:
            lead.append(word[0])
            word = word[1:]
        trail: list[str] = []
        while word and word[-1] in _SPLIT_CHARS:
            trail.append(word[-1])
            word = word[:-1]
        tokens.extend(lead)
        if word:
            tokens.append(word)
        tokens.extend(reversed(trail))
    return tokens


def detokenize(tokens: Iterable[str]) -> str:
    out: list[str] = []
    prev = None
    for tok in tokens:
        if out and tok not in _NO_SPACE_BEFORE and prev not in _NO_SPACE_AFTER:
            out.append(" ")
        out.append(tok)
        prev = tok
    return "".join(out)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    max_len: int = DEFAULT_MAX_LEN
    id_of: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:5] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the five special tokens")
        mapping = {tok: i for i, tok in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "id_of", mapping)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, max_len: int = DEFAULT_MAX_LEN) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines), max_len=max_len)


def build_vocab(
    corpus: Sequence[str], min_count: int = 1, max_len: int = DEFAULT_MAX_LEN
) -> Vocabulary:
    if not corpus:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    freq = Counter(tok for text in corpus for tok in tokenize(text))
    for special in SPECIAL_TOKENS:
        freq.pop(special, None)
    kept = sorted((t for t, c in freq.items() if c >= min_count), key=lambda t: (-freq[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(kept), max_len=max_len)


def encode(
    v: Vocabulary, text: str, add_cls: bool = False, add_eos: bool = False
) -> TokenSequence:
    ids = [v.id_of.get(tok, UNK_ID) for tok in tokenize(text)]
    if add_cls:
        ids.insert(0, CLS_ID)
    if add_eos:
        ids.append(EOS_ID)
    truncated = len(ids) > v.max_len
    if truncated:
        warnings.warn(f"sequence of {len(ids)} tokens truncated to {v.max_len}", TruncationWarning)
        ids = ids[: v.max_len]
    return TokenSequence(tuple(ids), truncated)


def decode(v: Vocabulary, seq: TokenSequence | Sequence[int]) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < v.size:
            raise IdOutOfRangeError(f"token id {i} outside vocabulary of size {v.size}")
        if i >= len(SPECIAL_TOKENS):
            words.append(v.tokens[i])
    return detokenize(words)


def oov_count(v: Vocabulary, text: str) -> tuple[int, int]:
    """Return (unknown tokens, total tokens) for ``text``."""
    toks = tokenize(text)
    return sum(t not in v.id_of for t in toks), len(toks)
