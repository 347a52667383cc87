"""Prompt templates for the three model roles in the pipeline.

The template bodies ship as package data and are treated as frozen
artifacts: rendering substitutes `{placeholder}` occurrences and nothing
else, so the text the models see is exactly the text on disk.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources

log = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")

TEMPLATE_NAMES = ("distress_reasoning", "linguistic_annotation", "draft_generation")


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        seen: list[str] = []
        for m in _PLACEHOLDER_RE.finditer(self.body):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return tuple(seen)


def load_template(name: str) -> PromptTemplate:
    if name not in TEMPLATE_NAMES:
        raise PromptError(f"unknown template: {name!r}")
    body = resources.files("distresskit.templates").joinpath(f"{name}.txt").read_text("utf-8")
    return PromptTemplate(name=name, body=body)


def render_prompt(template: PromptTemplate, bindings: dict[str, str]) -> str:
    """Substitute placeholders exactly; no other rewriting.

    Unbound placeholders are an error; extra bindings are logged as a
    warning and ignored.
    """
    needed = set(template.placeholders)
    missing = needed - set(bindings)
    if missing:
        raise PromptError(f"unbound placeholder: {sorted(missing)[0]}")
    extra = set(bindings) - needed
    if extra:
        log.warning("extra bindings ignored for %s: %s", template.name, sorted(extra))
    return _PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template.body)
