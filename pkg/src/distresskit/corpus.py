"""Tweet corpus ingestion, summary statistics, and dehydrated exports.

Records stream from JSONL or CSV files. Malformed lines are skipped and
counted rather than aborting the run: the historical collection is noisy and
a single bad line must not kill a multi-million-tweet pass.
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

KNOWN_LANGUAGE_TAGS = ("french", "english", "spanish", "undefined", "media_links")

_URL_RE = re.compile(r"^(https?://\S+|t\.co/\S+|pic\.twitter\.com/\S+)$", re.I)
_MEDIA_TOKEN_RE = re.compile(r"^(@\w+|#\w+|\[(media|photo|video|gif)\])$", re.I)


class Phase(str, Enum):
    PHASE1 = "phase1"
    PHASE2 = "phase2"
    SYNTHETIC = "synthetic"


class RecordError(ValueError):
    """A record violates the corpus schema."""


class DuplicateIdError(RecordError):
    pass


def _is_media_only(text: str) -> bool:
    tokens = text.split()
    if not tokens:
        return False
    return all(_URL_RE.match(t) or _MEDIA_TOKEN_RE.match(t) for t in tokens)


@dataclass(frozen=True)
class LanguageTag:
    """Language attribute of a tweet.

    Known tags are the platform-level ones; anything else is kept verbatim
    as a named 'other' language (each below a few percent of the data).
    """

    value: str

    def __post_init__(self):
        object.__setattr__(self, "value", self.value.strip().lower())
        if not self.value:
            raise RecordError("empty language tag")

    @property
    def is_other(self) -> bool:
        return self.value not in KNOWN_LANGUAGE_TAGS

    def __str__(self) -> str:
        return self.value


@dataclass
class TweetRecord:
    id: str
    text: str
    lang: LanguageTag
    created_at: dt.datetime | None = None
    phase: Phase = Phase.PHASE1
    author_ref: str | None = None
    seed_ref: str | None = None

    def validate(self) -> "TweetRecord":
        if not self.id:
            raise RecordError("record with empty id")
        if self.phase in (Phase.PHASE1, Phase.PHASE2) and not self.text:
            raise RecordError(f"record {self.id}: empty text in phase {self.phase.value}")
        if self.phase is Phase.SYNTHETIC and self.author_ref is not None:
            raise RecordError(f"record {self.id}: synthetic records must not carry author_ref")
        if self.lang.value == "media_links" and not _is_media_only(self.text):
            raise RecordError(
                f"record {self.id}: media_links tag on text that is not only links/media"
            )
        return self

    @classmethod
    def from_obj(cls, obj: dict) -> "TweetRecord":
        try:
            rid = str(obj["id"])
            text = str(obj["text"])
            lang = LanguageTag(str(obj["lang"]))
        except KeyError as exc:
            raise RecordError(f"missing required key {exc.args[0]!r}") from None
        created = obj.get("created_at")
        created_at = _parse_timestamp(created) if created else None
        phase = Phase(obj["phase"]) if obj.get("phase") else Phase.PHASE1
        return cls(
            id=rid,
            text=text,
            lang=lang,
            created_at=created_at,
            phase=phase,
            author_ref=obj.get("author_ref") or None,
            seed_ref=obj.get("seed_ref") or None,
        ).validate()

    def to_obj(self) -> dict:
        obj: dict = {"id": self.id, "text": self.text, "lang": self.lang.value}
        if self.created_at is not None:
            obj["created_at"] = self.created_at.isoformat()
        obj["phase"] = self.phase.value
        if self.author_ref is not None:
            obj["author_ref"] = self.author_ref
        if self.seed_ref is not None:
            obj["seed_ref"] = self.seed_ref
        return obj


def _parse_timestamp(value) -> dt.datetime:
    if isinstance(value, (int, float)):
        return dt.datetime.fromtimestamp(value, tz=dt.timezone.utc)
    ts = dt.datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)


class IngestStream:
    """Iterable over valid records of a corpus file.

    Iterate it once; afterwards `.records_read`, `.warnings` and
    `.skipped` describe what happened. Per-line problems are logged as
    warnings and the line is skipped.
    """

    def __init__(self, path: str, fmt: str = "jsonl"):
        if fmt not in ("jsonl", "csv"):
            raise ValueError(f"unknown corpus format {fmt!r}")
        self.path = path
        self.fmt = fmt
        self.records_read = 0
        self.skipped = 0
        self.warnings: list[str] = []
        self._consumed = False

    def _warn(self, lineno: int, reason: str) -> None:
        msg = f"{self.path}:{lineno}: {reason}"
        self.warnings.append(msg)
        self.skipped += 1
        log.warning("skipping malformed line: %s", msg)

    def __iter__(self) -> Iterator[TweetRecord]:
        if self._consumed:
            raise RuntimeError("IngestStream is single-pass; create a new one")
        self._consumed = True
        if self.fmt == "jsonl":
            yield from self._iter_jsonl()
        else:
            yield from self._iter_csv()
        if self.skipped:
            log.warning(
                "%s: %d records read, %d malformed lines skipped",
                self.path, self.records_read, self.skipped,
            )

    def _iter_jsonl(self) -> Iterator[TweetRecord]:
        import json

        with open(self.path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    if not isinstance(obj, dict):
                        raise RecordError("line is not a JSON object")
                    record = TweetRecord.from_obj(obj)
                except (ValueError, RecordError) as exc:
                    self._warn(lineno, str(exc))
                    continue
                self.records_read += 1
                yield record

    def _iter_csv(self) -> Iterator[TweetRecord]:
        with open(self.path, encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            for lineno, row in enumerate(reader, start=2):
                try:
                    obj = {k: v for k, v in row.items() if k is not None and v not in (None, "")}
                    record = TweetRecord.from_obj(obj)
                except (ValueError, RecordError) as exc:
                    self._warn(lineno, str(exc))
                    continue
                self.records_read += 1
                yield record


def ingest_corpus(path: str, fmt: str = "jsonl") -> IngestStream:
    """Open a corpus file for streaming ingestion."""
    return IngestStream(path, fmt)


@dataclass
class CorpusStats:
    """Corpus summary: totals, per-language counts/shares, monthly volume.

    Accumulation is mergeable (associative and commutative) so shards can
    be processed in parallel and combined.
    """

    total: int = 0
    language_counts: dict[str, int] = field(default_factory=dict)
    by_month: dict[tuple[int, int], int] = field(default_factory=dict)

    def add(self, record: TweetRecord) -> None:
        self.total += 1
        key = record.lang.value
        self.language_counts[key] = self.language_counts.get(key, 0) + 1
        if record.created_at is not None:
            ts = record.created_at
            mk = (ts.year, ts.month)
            self.by_month[mk] = self.by_month.get(mk, 0) + 1

    def merge(self, other: "CorpusStats") -> "CorpusStats":
        merged = CorpusStats(total=self.total + other.total)
        for src in (self.language_counts, other.language_counts):
            for k, v in src.items():
                merged.language_counts[k] = merged.language_counts.get(k, 0) + v
        for src in (self.by_month, other.by_month):
            for k, v in src.items():
                merged.by_month[k] = merged.by_month.get(k, 0) + v
        return merged

    @property
    def by_language(self) -> dict[str, tuple[int, float]]:
        """Counts and shares, ordered by count descending then name."""
        if self.total == 0:
            return {}
        items = sorted(self.language_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {lang: (count, count / self.total) for lang, count in items}

    def to_obj(self) -> dict:
        return {
            "total": self.total,
            "by_language": [
                {"lang": lang, "count": count, "share": share}
                for lang, (count, share) in self.by_language.items()
            ],
            "by_month": [
                {"year": y, "month": m, "count": c}
                for (y, m), c in sorted(self.by_month.items())
            ],
        }

    def csv_rows(self) -> list[list]:
        rows: list[list] = [["dimension", "key", "count", "share"]]
        for lang, (count, share) in self.by_language.items():
            rows.append(["language", lang, count, f"{share:.6f}"])
        for (y, m), c in sorted(self.by_month.items()):
            rows.append(["month", f"{y:04d}-{m:02d}", c, ""])
        return rows

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f).writerows(self.csv_rows())


def language_stats(records: Iterable[TweetRecord]) -> CorpusStats:
    """Accumulate corpus statistics over a record stream."""
    stats = CorpusStats()
    for record in records:
        stats.add(record)
    return stats


def dehydrate(records: Iterable[TweetRecord]) -> list[str]:
    """Project a corpus down to its ids, preserving order.

    The result carries no text or author data, so it can be released where
    the underlying tweets cannot.
    """
    ids: list[str] = []
    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise DuplicateIdError(f"duplicate id: {record.id}")
        seen.add(record.id)
        ids.append(record.id)
    return ids
