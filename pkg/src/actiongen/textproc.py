"""Caption tokenization, rule stemming, vocabulary, and position encodings."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigError, Tensor

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

MAX_CAPTION_TOKENS = 43
MAX_VOCAB_SIZE = 235

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Applied in order; a rule is skipped when stripping would leave fewer than
# 3 characters. Consistency, not linguistic accuracy, is the contract.
_STEM_RULES = (("ies", "y"), ("es", ""), ("s", ""), ("ing", ""), ("ed", ""))


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, dropping the punctuation."""
    return _TOKEN_RE.findall(text.lower())


def stem(token: str) -> str:
    if not token:
        raise ValueError("stem: empty token")
    for suffix, repl in _STEM_RULES:
        if token.endswith(suffix):
            candidate = token[: len(token) - len(suffix)] + repl
            if len(candidate) >= 3:
                return candidate
    return token


def stem_tokens(text: str) -> list[str]:
    return [stem(t) for t in tokenize(text)]


@dataclass
class CaptionIds:
    """Vocabulary ids for one caption, before any padding."""

    ids: np.ndarray
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise ValueError(f"caption ids must be 1-D, got shape {self.ids.shape}")


class Vocab:
    """stem <-> id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, stems: list[str]):
        self.id_to_stem = [PAD_TOKEN, UNK_TOKEN] + list(stems)
        if len(self.id_to_stem) > MAX_VOCAB_SIZE:
            raise ConfigError(f"vocabulary of {len(self.id_to_stem)} exceeds {MAX_VOCAB_SIZE}")
        self.stem_to_id = {s: i for i, s in enumerate(self.id_to_stem)}
        if len(self.stem_to_id) != len(self.id_to_stem):
            raise ConfigError("vocabulary contains duplicate stems")

    @property
    def size(self) -> int:
        return len(self.id_to_stem)

    def encode_stem(self, s: str) -> int:
        return self.stem_to_id.get(s, UNK_ID)

    def decode_id(self, i: int) -> str:
        return self.id_to_stem[i]

    def encode_caption(self, text: str, max_len: int = MAX_CAPTION_TOKENS) -> CaptionIds:
        stems = stem_tokens(text)
        if not stems:
            raise ValueError(f"caption has no tokens: {text!r}")
        if len(stems) > max_len:
            raise ValueError(f"caption has {len(stems)} tokens, limit is {max_len}")
        ids = np.array([self.encode_stem(s) for s in stems], dtype=np.int64)
        return CaptionIds(ids=ids, true_length=len(stems))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, s in enumerate(self.id_to_stem):
                fh.write(f"{i}\t{s}\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        stems = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2 or int(parts[0]) != lineno:
                    raise ValueError(f"{Path(path)}: line {lineno + 1}: malformed vocab entry")
                stems.append(parts[1])
        if stems[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError(f"{Path(path)}: reserved ids 0/1 must be {PAD_TOKEN}/{UNK_TOKEN}")
        return cls(stems[2:])


def build_vocab(corpus: list[str], max_size: int = MAX_VOCAB_SIZE) -> Vocab:
    """Frequency-ranked stems, ties broken lexicographically, top max_size - 2 kept."""
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    counts: dict[str, int] = {}
    for caption in corpus:
        for s in stem_tokens(caption):
            counts[s] = counts.get(s, 0) + 1
    ranked = sorted(counts, key=lambda s: (-counts[s], s))
    return Vocab(ranked[: max_size - 2])


def positional_encoding(max_len: int, d: int) -> np.ndarray:
    """Sinusoid table: even dims sin(pos / 10000^(2j/d)), odd dims the cosine."""
    if d % 2 != 0:
        raise ConfigError(f"positional encoding width must be even, got {d}")
    pos = np.arange(max_len, dtype=dc.DTYPE)[:, None]
    rates = np.power(10000.0, np.arange(0, d, 2, dtype=dc.DTYPE) / d)
    angles = pos / rates
    table = np.zeros((max_len, d), dtype=dc.DTYPE)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def embed(ids, table: Tensor, positions: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Word embedding rows plus position rows; also returns the real-token mask.

    ``ids`` may be (n,) or batched (batch, n); the mask is True at non-PAD
    positions and is what downstream attention and pooling must respect.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n = ids.shape[-1]
    if n > positions.shape[0]:
        raise ValueError(f"caption length {n} exceeds position table {positions.shape[0]}")
    rows = dc.embedding(table, ids)
    out = dc.add(rows, positions[:n])
    return out, ids != PAD_ID
