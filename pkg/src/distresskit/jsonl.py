"""Shared JSONL reading/writing helpers."""

from __future__ import annotations

import json
import os
from typing import Any, Iterable, Iterator


def dumps(obj: Any) -> str:
    """Serialize one record the way every writer in this package does.

    Compact separators and ensure_ascii=False keep output files stable
    byte-for-byte across runs, which the determinism checks rely on.
    """
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def read_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    """Yield one parsed object per line, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | os.PathLike, rows: Iterable[dict]) -> int:
    """Write rows as JSONL, returning the number of rows written."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(dumps(row) + "\n")
            n += 1
    return n


def append_jsonl_line(fh, row: dict) -> None:
    """Append one row to an open handle and flush it to disk."""
    fh.write(dumps(row) + "\n")
    fh.flush()
    os.fsync(fh.fileno())
