"""Word-level vocabulary, instruction/caption tokenization, and fixed 1D
sinusoidal position encodings."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
MASK_ID = 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<mask>")

_WORD_RE = re.compile(r"[a-z0-9]+")


def normalize(s: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation."""
    return _WORD_RE.findall(s.lower())


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


@dataclass
class TokenSeq:
    """Fixed-length id buffer; ids past true_length are all <pad>."""

    ids: np.ndarray  # int32, shape (n_max,)
    true_length: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        assert self.true_length <= self.ids.shape[0]


def build_vocab(corpus: list[str]) -> Vocabulary:
    """Reserved ids first, then all corpus words sorted lexicographically."""
    if not corpus:
        raise ValueError("build_vocab: corpus is empty")
    words = set()
    for line in corpus:
        words.update(normalize(line))
    return Vocabulary(RESERVED + tuple(sorted(words)))


def encode(s: str, vocab: Vocabulary, n_max: int) -> TokenSeq:
    if n_max < 2:
        raise ValueError(f"encode: n_max must be >= 2, got {n_max}")
    ids = [BOS_ID] + [vocab.id_of(w) for w in normalize(s)]
    ids = ids[:n_max]
    true_length = len(ids)
    ids = ids + [PAD_ID] * (n_max - true_length)
    return TokenSeq(np.array(ids, dtype=np.int32), true_length)


def decode(seq: TokenSeq, vocab: Vocabulary) -> list[str]:
    """Word sequence with <bos>/<pad> stripped; unknown ids stay '<unk>'."""
    out = []
    for idx in seq.ids[: seq.true_length]:
        if idx in (BOS_ID, PAD_ID):
            continue
        out.append(vocab.token_of(int(idx)))
    return out


def empty_tokens(n_max: int) -> TokenSeq:
    """All-<pad> sequence (the instruction-off condition)."""
    return TokenSeq(np.zeros(n_max, dtype=np.int32), 0)


def positions_1d(n_max: int, d: int) -> np.ndarray:
    """Fixed sinusoidal encodings, sin/cos interleaved: row 0 is [0,1,0,1,...]."""
    if d % 2 != 0:
        raise ValueError(f"positions_1d: d must be even, got {d}")
    pos = np.arange(n_max, dtype=np.float64)[:, None]
    freqs = np.exp(-np.log(10000.0) * np.arange(d // 2, dtype=np.float64) / (d // 2))
    angles = pos * freqs[None, :]
    out = np.zeros((n_max, d), dtype=np.float32)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
