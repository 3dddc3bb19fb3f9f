"""Lowercase byte-level BPE.

Reserved ids: PAD=0, SOT=1, EOT=2. Ids 3..258 are the 256 raw bytes and id
259 + k is the k-th learned merge. Merges files store one pair per line in
rank order, each token spelled with the printable byte alphabet from
:func:`bytes_to_unicode` so that spaces and control bytes survive.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

PAD, SOT, EOT = 0, 1, 2
N_SPECIAL = 3
BASE_SIZE = N_SPECIAL + 256
CONTEXT_LENGTH = 77
MERGES_HEADER = "#version: hsfuse-bpe 1"

# A leading space sticks to the following word, so pre-tokens concatenate back
# to the exact input.
PRETOKEN_RE = re.compile(
    r"""'(?:s|t|re|ve|m|ll|d)| ?[^\W\d_]+| ?\d+| ?[^\s\w]+|_+|\s+(?!\S)|\s+"""
)


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Map every byte to a printable character (printable bytes map to themselves)."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(
        range(ord("®"), ord("ÿ") + 1)
    )
    chars = keep[:]
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(keep, map(chr, chars)))


def _spell(token: bytes) -> str:
    table = bytes_to_unicode()
    return "".join(table[b] for b in token)


def _unspell(text: str) -> bytes:
    inverse = {v: k for k, v in bytes_to_unicode().items()}
    return bytes(inverse[ch] for ch in text)


def pretokenize(text: str) -> list[bytes]:
    return [m.encode("utf-8") for m in PRETOKEN_RE.findall(text.lower())]


@dataclass
class BPEVocab:
    merges: list[tuple[bytes, bytes]]
    _ranks: dict = field(init=False, repr=False)
    _ids: dict = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._ids = {bytes([b]): N_SPECIAL + b for b in range(256)}
        for i, (a, b) in enumerate(self.merges):
            self._ids[a + b] = BASE_SIZE + i
        self._tokens = {v: k for k, v in self._ids.items()}
        self._cache = {}

    @property
    def size(self) -> int:
        return BASE_SIZE + len(self.merges)

    def token_bytes(self, token_id: int) -> bytes:
        return self._tokens[token_id]

    def _apply(self, word: bytes) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in word]
        while len(parts) > 1:
            best, best_rank = None, None
            for i in range(len(parts) - 1):
                r = self._ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            pair = (parts[best], parts[best + 1])
            merged, i = [], 0
            while i < len(parts):
                if i < len(parts) - 1 and (parts[i], parts[i + 1]) == pair:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = [self._ids[p] for p in parts]
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        """BPE ids for ``text`` (lowercased), without special tokens."""
        out: list[int] = []
        for word in pretokenize(text):
            out.extend(self._apply(word))
        return out

    def decode(self, ids) -> str:
        data = b"".join(self._tokens[int(i)] for i in ids if int(i) >= N_SPECIAL)
        return data.decode("utf-8", errors="replace")

    def to_text(self) -> str:
        lines = [MERGES_HEADER] + [f"{_spell(a)} {_spell(b)}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def from_text(cls, text: str) -> "BPEVocab":
        merges = []
        for line in text.splitlines():
            if not line or line.startswith("#version"):
                continue
            a, b = line.split(" ")
            merges.append((_unspell(a), _unspell(b)))
        return cls(merges)

    @classmethod
    def load(cls, path: str | Path) -> "BPEVocab":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: list[str], target_size: int) -> BPEVocab:
    """Learn merges on ``corpus`` until the vocabulary reaches ``target_size``.

    Stops early once no adjacent pair remains. Ties in pair frequency go to the
    pair that appears first in the corpus, so the result depends only on the
    corpus order and ``target_size``.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    if target_size < BASE_SIZE:
        raise ValueError(f"target_size {target_size} is below the base alphabet size {BASE_SIZE}")

    word_counts: Counter = Counter()
    for text in corpus:
        word_counts.update(pretokenize(text))
    words = [[bytes([b]) for b in w] for w in word_counts]
    freqs = list(word_counts.values())

    merges: list[tuple[bytes, bytes]] = []
    while BASE_SIZE + len(merges) < target_size:
        pair_counts: dict[tuple[bytes, bytes], int] = {}
        for parts, f in zip(words, freqs):
            for i in range(len(parts) - 1):
                pair = (parts[i], parts[i + 1])
                pair_counts[pair] = pair_counts.get(pair, 0) + f
        if not pair_counts:
            break
        # dict keeps first-seen order, and max() returns the first maximum
        best = max(pair_counts, key=pair_counts.__getitem__)
        merges.append(best)
        joined = best[0] + best[1]
        for j, parts in enumerate(words):
            if len(parts) < 2:
                continue
            out, i = [], 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == best[0] and parts[i + 1] == best[1]:
                    out.append(joined)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            words[j] = out
    return BPEVocab(merges)


@dataclass
class TokenSequence:
    ids: np.ndarray  # (77,) int64
    valid_len: int


def tokenize(text: str, vocab: BPEVocab, context_length: int = CONTEXT_LENGTH) -> TokenSequence:
    """SOT + BPE ids + EOT, truncated to ``context_length`` and right-padded with PAD."""
    body = vocab.encode(text)[: context_length - 2]
    seq = [SOT, *body, EOT]
    ids = np.full(context_length, PAD, dtype=np.int64)
    ids[: len(seq)] = seq
    return TokenSequence(ids=ids, valid_len=len(seq))


def tokenize_batch(texts: list[str], vocab: BPEVocab, context_length: int = CONTEXT_LENGTH):
    """Stack token ids into (B, L) and return the EOT positions (B,)."""
    seqs = [tokenize(t, vocab, context_length) for t in texts]
    ids = np.stack([s.ids for s in seqs])
    eot = np.array([s.valid_len - 1 for s in seqs], dtype=np.int64)
    return ids, eot


def detokenize(seq: TokenSequence, vocab: BPEVocab) -> str:
    return vocab.decode(seq.ids[1 : seq.valid_len - 1])
