"""Training-corpus assembly: token accounting and fixed-length packing.

Documents are concatenated with a single reserved separator token and cut
into fixed-length sequences; a trailing partial sequence is dropped and its
tokens are accounted for, never silently truncated away mid-document.
Everything here is exact integer bookkeeping: total_tokens is the sum of
per-example token counts, and the effective step size is the product of the
parallelism knobs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Iterable, Iterator

from .tokenizer import BpeTokenizer, SEP_TOKEN_ID

EXAMPLE_SOURCES = ("synthetic_tweet_reasoning", "generalist")
REASONING_LANGUAGES = ("en", "fr")


class PackingError(ValueError):
    pass


@dataclass
class TrainingExample:
    source: str
    text: str
    token_count: int
    reasoning_language: str | None = None

    def validate(self) -> "TrainingExample":
        if self.source not in EXAMPLE_SOURCES:
            raise PackingError(f"unknown example source: {self.source!r}")
        if self.source == "synthetic_tweet_reasoning" and self.reasoning_language is None:
            raise PackingError("synthetic examples must carry a reasoning_language")
        if self.reasoning_language is not None and self.reasoning_language not in REASONING_LANGUAGES:
            raise PackingError(f"unknown reasoning language: {self.reasoning_language!r}")
        if self.token_count < 0:
            raise PackingError("negative token_count")
        return self


def make_example(
    source: str,
    text: str,
    tokenizer: BpeTokenizer,
    reasoning_language: str | None = None,
) -> TrainingExample:
    """Build an example whose token_count is the tokenizer's count of text."""
    return TrainingExample(
        source=source,
        text=text,
        token_count=tokenizer.count(text),
        reasoning_language=reasoning_language,
    ).validate()


@dataclass
class PackingManifest:
    total_tokens: int
    sequences: int
    sequence_length: int
    epochs: int
    tokens_per_step: int
    steps_per_epoch: int
    dropped_tail_tokens: int

    def to_obj(self) -> dict:
        return {
            "total_tokens": self.total_tokens,
            "sequences": self.sequences,
            "sequence_length": self.sequence_length,
            "epochs": self.epochs,
            "tokens_per_step": self.tokens_per_step,
            "steps_per_epoch": self.steps_per_epoch,
            "dropped_tail_tokens": self.dropped_tail_tokens,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PackingManifest":
        return cls(**{k: int(obj[k]) for k in (
            "total_tokens", "sequences", "sequence_length", "epochs",
            "tokens_per_step", "steps_per_epoch", "dropped_tail_tokens",
        )})


def mix_examples(
    synthetic: Iterable[TrainingExample],
    generalist: Iterable[TrainingExample],
    mix: float,
) -> list[TrainingExample]:
    """Combine task examples with a token-count share of generalist data.

    `mix` is the generalist share of the final corpus by tokens. All
    synthetic examples are kept; generalist examples are consumed in
    stream order until their token total reaches the implied target.
    """
    if not 0.0 <= mix < 1.0:
        raise PackingError(f"mix must be in [0, 1), got {mix}")
    combined = [ex.validate() for ex in synthetic]
    if mix == 0.0:
        return combined
    synthetic_tokens = sum(ex.token_count for ex in combined)
    target = synthetic_tokens * mix / (1.0 - mix)
    taken = 0
    for ex in generalist:
        if taken >= target:
            break
        combined.append(ex.validate())
        taken += ex.token_count
    return combined


def pack_examples(
    examples: list[TrainingExample],
    tokenizer: BpeTokenizer,
    *,
    sequence_length: int,
    epochs: int,
    tokens_per_step: int,
    shuffle_seed: int | None = 0,
) -> tuple[Iterator[list[int]], PackingManifest]:
    """Pack examples into fixed-length sequences plus an exact manifest.

    Document order is shuffled deterministically under the seed, documents
    are joined with the separator token, and the stream is chunked; a
    document longer than sequence_length simply spans several sequences.
    """
    if sequence_length < 1:
        raise PackingError("sequence_length must be >= 1")
    if epochs < 1:
        raise PackingError("epochs must be >= 1")
    order = list(range(len(examples)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)

    total_tokens = sum(examples[i].token_count for i in order)
    stream_tokens = total_tokens + max(0, len(order) - 1)  # separators between documents
    sequences = stream_tokens // sequence_length
    dropped_tail = stream_tokens - sequences * sequence_length
    manifest = PackingManifest(
        total_tokens=total_tokens,
        sequences=sequences,
        sequence_length=sequence_length,
        epochs=epochs,
        tokens_per_step=tokens_per_step,
        steps_per_epoch=math.ceil(total_tokens / tokens_per_step) if total_tokens else 0,
        dropped_tail_tokens=dropped_tail,
    )

    def generate() -> Iterator[list[int]]:
        buffer: list[int] = []
        for pos, idx in enumerate(order):
            ex = examples[idx]
            if pos:
                buffer.append(SEP_TOKEN_ID)
            ids = tokenizer.encode(ex.text)
            if len(ids) != ex.token_count:
                raise PackingError(
                    f"stale token_count for a {ex.source} example: "
                    f"recorded {ex.token_count}, tokenizer produced {len(ids)}"
                )
            buffer.extend(ids)
            while len(buffer) >= sequence_length:
                yield buffer[:sequence_length]
                del buffer[:sequence_length]

    return generate(), manifest
