"""Flat `key = value` config files.

Both the backend descriptors and the pipeline config are stored in a plain
key-value format: one assignment per line, `#` comments, blank lines ignored.
Values stay strings here; typed accessors live on the dataclasses that load
these files.
"""

from __future__ import annotations

import os


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_kv(path: str | os.PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_kv(f.read())


def dump_kv(items: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())


def save_kv(path: str | os.PathLike, items: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_kv(items))
