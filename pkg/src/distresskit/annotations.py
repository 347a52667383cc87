"""Tag-based linguistic annotations and distress reasoning outputs.

Two model output formats live here: the xml-like `<field>value</field>`
annotation tags, and the three-section reasoning text whose Distress section
ends in a present/absent/external judgment. Parsing is structural only; no
inference happens here, and the reasoning parser is total (every input maps
to a binary label, defaulting to no_distress on parse failure).
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, fields

log = logging.getLogger(__name__)

LANGUAGE_REGISTERS = ("formal", "standard", "casual", "street", "dialectical")
LANGUAGE_QUALITIES = ("standard", "imperfect", "poor")
EMOTIONS = ("anger", "disgust", "fear", "happiness", "sadness", "surprise")
TONES = ("sarcastic", "emphatic", "vulgar")
INTENSITIES = ("low", "medium", "high", "extreme")
INTENTS = (
    "service_request",
    "complaint",
    "alert",
    "praise",
    "humor",
    "solidarity",
    "practical_info",
)

JUDGMENTS = ("present", "absent", "external")
DISTRESS = "distress"
NO_DISTRESS = "no_distress"
LABEL_SOURCES = ("model_parse", "human_vote", "parse_failure_default")

# canonical tag order; also the order render_annotation emits
ANNOTATION_FIELDS = (
    "event",
    "location",
    "time",
    "persona",
    "language_register",
    "language_quality",
    "language_switching",
    "emotion",
    "tone",
    "intensity",
    "intent",
    "theme",
)

_ENUM_FIELDS = {
    "language_register": LANGUAGE_REGISTERS,
    "language_quality": LANGUAGE_QUALITIES,
    "emotion": EMOTIONS,
    "tone": TONES,
    "intensity": INTENSITIES,
    "intent": INTENTS,
}

_TAG_RE = re.compile(r"<([A-Za-z_]+)>(.*?)</\1>", re.S)
_SECTION_RE = re.compile(r"^###\s*(.+?)\s*###\s*$", re.M)
_JUDGMENT_RE = re.compile(r"\b(present|absent|external)\b", re.I)

SECTION_STANCE = "Text stance & pragmatics"
SECTION_DISTRESS = "Distress"
SECTION_SEMIOTIC = "Semiotic potential"


class AnnotationError(ValueError):
    """Annotation text violates the tag schema."""


class AnnotationParseError(AnnotationError):
    """No recognizable tags in the input."""


@dataclass
class LinguisticAnnotation:
    event: str | None = None
    location: str | None = None
    time: str | None = None
    persona: str | None = None
    language_register: str | None = None
    language_quality: str | None = None
    language_switching: tuple[str, ...] | None = None
    emotion: str | None = None
    tone: str | None = None
    intensity: str | None = None
    intent: str | None = None
    theme: str | None = None

    def populated_fields(self) -> list[str]:
        return [f for f in ANNOTATION_FIELDS if getattr(self, f) is not None]

    def validate(self) -> "LinguisticAnnotation":
        if not self.populated_fields():
            raise AnnotationError("annotation with no populated fields")
        for name, allowed in _ENUM_FIELDS.items():
            value = getattr(self, name)
            if value is not None and value not in allowed:
                raise AnnotationError(f"invalid {name}: {value!r}")
        if self.language_switching is not None:
            if len(self.language_switching) == 0:
                raise AnnotationError("language_switching present but empty")
            for lang in self.language_switching:
                if lang != lang.lower() or len(lang) < 2:
                    raise AnnotationError(f"invalid language name: {lang!r}")
        return self

    def to_obj(self) -> dict:
        obj = {}
        for name in ANNOTATION_FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            obj[name] = list(value) if name == "language_switching" else value
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "LinguisticAnnotation":
        kwargs = {}
        for name in ANNOTATION_FIELDS:
            if name in obj and obj[name] is not None:
                value = obj[name]
                kwargs[name] = tuple(value) if name == "language_switching" else value
        return cls(**kwargs).validate()


def _normalize_enum(name: str, raw: str) -> str:
    """Map a tag value onto its canonical enum form.

    Intent values appear in prose form ("service request") in model output;
    the canonical form uses underscores.
    """
    value = raw.strip().lower()
    if name == "intent":
        value = value.replace(" ", "_")
    return value


def parse_annotation(text: str) -> tuple[LinguisticAnnotation, list[str]]:
    """Parse `<field>value</field>` tags anywhere in a model output.

    Returns the annotation together with parse warnings (unknown tags,
    repeated tags). Raises AnnotationParseError when no tag is recognized
    and AnnotationError when an enum field holds an unlisted value.
    """
    warnings: list[str] = []
    values: dict[str, object] = {}
    matched = False
    for m in _TAG_RE.finditer(text):
        name, raw = m.group(1), m.group(2)
        if name not in ANNOTATION_FIELDS:
            warnings.append(f"unknown tag: {name}")
            continue
        matched = True
        if name in values:
            warnings.append(f"repeated tag ignored: {name}")
            continue
        if name in _ENUM_FIELDS:
            value = _normalize_enum(name, raw)
            if value not in _ENUM_FIELDS[name]:
                raise AnnotationError(f"invalid {name}: {raw.strip()!r}")
            values[name] = value
        elif name == "language_switching":
            langs = tuple(part.strip().lower() for part in raw.split(",") if part.strip())
            values[name] = langs
        else:
            values[name] = raw.strip()
    if not matched:
        raise AnnotationParseError("no annotation tags found")
    annotation = LinguisticAnnotation(**values)  # type: ignore[arg-type]
    return annotation.validate(), warnings


def _render_value(name: str, value) -> str:
    if name == "language_switching":
        return ", ".join(value)
    if name == "intent":
        return value.replace("_", " ")
    return value


def render_annotation(annotation: LinguisticAnnotation) -> str:
    """Render one tag per populated field, in canonical field order."""
    annotation.validate()
    lines = []
    for name in ANNOTATION_FIELDS:
        value = getattr(annotation, name)
        if value is None:
            continue
        lines.append(f"<{name}>{_render_value(name, value)}</{name}>")
    return "\n".join(lines)


@dataclass(frozen=True)
class BinaryDistressLabel:
    value: str
    source: str

    def __post_init__(self):
        if self.value not in (DISTRESS, NO_DISTRESS):
            raise ValueError(f"invalid label value: {self.value!r}")
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"invalid label source: {self.source!r}")
        if self.source == "parse_failure_default" and self.value != NO_DISTRESS:
            raise ValueError("parse_failure_default labels must be no_distress")


PARSE_FAILURE_LABEL = BinaryDistressLabel(NO_DISTRESS, "parse_failure_default")


@dataclass
class DistressOutcome:
    """Parsed three-way judgment plus the graded semiotic evidence.

    `judgment` is None only when the reasoning text had no extractable
    judgment; callers then score the paired binary label, which defaults
    to the negative class.
    """

    judgment: str | None
    semiotic_grade: int | None = None
    reasoning_sections: dict[str, str] = field(default_factory=dict)


def split_sections(text: str) -> dict[str, str]:
    """Split `### Name ###` sections into an ordered name -> body map."""
    sections: dict[str, str] = {}
    matches = list(_SECTION_RE.finditer(text))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[m.group(1)] = text[m.end():end].strip()
    return sections


def _find_section(sections: dict[str, str], keyword: str) -> str | None:
    for name, body in sections.items():
        if keyword.lower() in name.lower():
            return body
    return None


def parse_distress_output(text: str) -> tuple[DistressOutcome, BinaryDistressLabel]:
    """Extract the judgment and grade from a reasoning output.

    Never raises: when the Distress section is missing or carries no
    judgment token, the outcome has judgment None and the binary label is
    the parse-failure default (no_distress). The judgment is the last
    present/absent/external token in the Distress section, so emphasis
    markup and restated criteria earlier in the section do not confuse it.
    """
    sections = split_sections(text)
    distress_body = _find_section(sections, "distress")

    judgment: str | None = None
    if distress_body:
        tokens = _JUDGMENT_RE.findall(distress_body)
        if tokens:
            judgment = tokens[-1].lower()

    grade: int | None = None
    semiotic_body = _find_section(sections, "semiotic")
    if semiotic_body:
        m = re.search(r"\b(\d{1,2})\b", semiotic_body)
        if m:
            value = int(m.group(1))
            if 1 <= value <= 10:
                grade = value
            else:
                log.warning("semiotic grade %d outside [1,10]; dropped", value)

    outcome = DistressOutcome(
        judgment=judgment, semiotic_grade=grade, reasoning_sections=sections
    )
    if judgment is None:
        return outcome, PARSE_FAILURE_LABEL
    value = DISTRESS if judgment == "present" else NO_DISTRESS
    return outcome, BinaryDistressLabel(value, "model_parse")
