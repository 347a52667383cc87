"""Byte-pair tokenizer used for token accounting and corpus packing.

The id space is fixed at 65,536 to match the training manifest's vocabulary:
ids 0-255 are raw bytes, merge ids follow in merge-table order, and the top
id is reserved as the document separator. The shipped merge table is a
frozen fixture (data/bpe_merges.txt); any table up to the id space size can
be plugged in instead.
"""

from __future__ import annotations

import functools
from importlib import resources
from typing import Iterable

ID_SPACE = 65536
SEP_TOKEN_ID = ID_SPACE - 1
_BYTE_IDS = 256


class TokenizerError(ValueError):
    pass


class BpeTokenizer:
    def __init__(self, merges: list[tuple[int, int]]):
        if _BYTE_IDS + len(merges) > SEP_TOKEN_ID:
            raise TokenizerError("merge table exceeds the id space")
        self.merges = list(merges)
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._token_bytes: list[bytes] = [bytes([i]) for i in range(_BYTE_IDS)]
        for left, right in self.merges:
            if left >= len(self._token_bytes) or right >= len(self._token_bytes):
                raise TokenizerError(f"merge refers to unknown token: ({left}, {right})")
            self._token_bytes.append(self._token_bytes[left] + self._token_bytes[right])

    @property
    def vocab_size(self) -> int:
        return ID_SPACE

    @property
    def trained_tokens(self) -> int:
        return _BYTE_IDS + len(self.merges)

    def encode(self, text: str) -> list[int]:
        ids = list(text.encode("utf-8"))
        if len(ids) < 2 or not self._ranks:
            return ids
        while True:
            best_rank = None
            best_pair = None
            prev = ids[0]
            for cur in ids[1:]:
                rank = self._ranks.get((prev, cur))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pair = (prev, cur)
                prev = cur
            if best_pair is None:
                return ids
            merged_id = _BYTE_IDS + best_rank
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best_pair:
                    out.append(merged_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
            if len(ids) < 2:
                return ids

    def decode(self, ids: Iterable[int]) -> str:
        chunks = []
        for i in ids:
            if i == SEP_TOKEN_ID:
                continue
            if i >= len(self._token_bytes):
                raise TokenizerError(f"id {i} outside the trained vocabulary")
            chunks.append(self._token_bytes[i])
        return b"".join(chunks).decode("utf-8", errors="replace")

    def count(self, text: str) -> int:
        return len(self.encode(text))


def train_bpe(texts: Iterable[str], num_merges: int) -> list[tuple[int, int]]:
    """Learn a merge table by greedy pair counting over the corpus.

    Ties break toward the lexicographically smallest pair so training is
    deterministic for a given corpus order-independently.
    """
    seqs = [list(t.encode("utf-8")) for t in texts if t]
    merges: list[tuple[int, int]] = []
    for step in range(num_merges):
        counts: dict[tuple[int, int], int] = {}
        for seq in seqs:
            for pair in zip(seq, seq[1:]):
                counts[pair] = counts.get(pair, 0) + 1
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if counts[best] < 2:
            break
        new_id = _BYTE_IDS + len(merges)
        merges.append(best)
        for si, seq in enumerate(seqs):
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and (seq[i], seq[i + 1]) == best:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[si] = out
    return merges


def save_merges(path: str, merges: list[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for left, right in merges:
            f.write(f"{left} {right}\n")


def load_merges(path_or_text: str, *, is_text: bool = False) -> list[tuple[int, int]]:
    text = path_or_text if is_text else open(path_or_text, encoding="utf-8").read()
    merges = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        left, right = line.split()
        merges.append((int(left), int(right)))
    return merges


@functools.lru_cache(maxsize=1)
def default_tokenizer() -> BpeTokenizer:
    """The tokenizer backed by the shipped merge-table fixture."""
    text = resources.files("distresskit.data").joinpath("bpe_merges.txt").read_text("utf-8")
    return BpeTokenizer(load_merges(text, is_text=True))
