"""Uniform chat-completion gateway over remote HTTP backends and a
deterministic mock.

The pipeline stages never talk to a provider directly: they build a
CompletionRequest against one of the shipped prompt templates and the
gateway handles rendering, per-backend concurrency limits, and retries.
The mock backend makes a full pipeline run possible with zero model
weights; its output is a pure function of (template, bindings, seed).
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import httpx

from . import kvconfig
from .annotations import EMOTIONS, INTENSITIES, INTENTS, JUDGMENTS, LANGUAGE_REGISTERS, TONES
from .prompts import PromptTemplate, load_template, render_prompt

log = logging.getLogger(__name__)

_RETRYABLE_STATUS = (408, 429)


class GatewayError(RuntimeError):
    pass


class BackendUnavailable(GatewayError):
    """Raised after retries are exhausted; carries the last failure."""


@dataclass
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass
class Completion:
    text: str
    usage: Usage


@dataclass
class CompletionRequest:
    template_name: str
    bindings: dict[str, str]
    temperature: float = 0.1
    repetition_penalty: float = 0.1
    max_tokens: int = 1024

    def validate(self) -> "CompletionRequest":
        if self.temperature < 0:
            raise GatewayError("temperature must be >= 0")
        if self.repetition_penalty <= 0:
            raise GatewayError("repetition_penalty must be > 0")
        return self


@dataclass
class BackendDescriptor:
    kind: str
    model_name: str = "mock"
    endpoint: str | None = None
    max_in_flight: int = 4
    retry_max_attempts: int = 3
    retry_base_backoff: float = 0.5
    api_key_env: str | None = None
    seed: int = 0

    def validate(self) -> "BackendDescriptor":
        if self.kind not in ("remote", "mock"):
            raise GatewayError(f"unknown backend kind: {self.kind!r}")
        if self.kind == "remote" and not self.endpoint:
            raise GatewayError("remote backend requires an endpoint")
        if self.max_in_flight < 1:
            raise GatewayError("max_in_flight must be >= 1")
        return self

    @classmethod
    def from_config(cls, path: str) -> "BackendDescriptor":
        kv = kvconfig.load_kv(path)
        return cls(
            kind=kv.get("kind", "mock"),
            model_name=kv.get("model_name", "mock"),
            endpoint=kv.get("endpoint") or None,
            max_in_flight=int(kv.get("max_in_flight", "4")),
            retry_max_attempts=int(kv.get("retry_max_attempts", "3")),
            retry_base_backoff=float(kv.get("retry_base_backoff", "0.5")),
            api_key_env=kv.get("api_key_env") or None,
            seed=int(kv.get("seed", "0")),
        ).validate()

    def to_config(self, path: str) -> None:
        items = {"kind": self.kind, "model_name": self.model_name}
        if self.endpoint:
            items["endpoint"] = self.endpoint
        items["max_in_flight"] = str(self.max_in_flight)
        items["retry_max_attempts"] = str(self.retry_max_attempts)
        items["retry_base_backoff"] = str(self.retry_base_backoff)
        if self.api_key_env:
            items["api_key_env"] = self.api_key_env
        items["seed"] = str(self.seed)
        kvconfig.save_kv(path, items)


def _digest(*parts: str) -> int:
    h = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _estimate_tokens(text: str) -> int:
    return max(1, len(text.encode("utf-8")) // 4)


_MOCK_EVENTS = (
    "A passenger faints in a crowded carriage",
    "The author reports a long service interruption",
    "Someone describes an assault on the platform",
    "A commuter complains about a missed connection",
    "The author witnesses an evacuation of the station",
    "A rider praises a helpful driver",
)
_MOCK_LOCATIONS = (
    "Saint-Paul station",
    "Châtelet station",
    "line 13",
    "Gare du Nord",
    "the RER B platform",
)
_MOCK_TIMES = ("early morning", "rush hour", "around 9 pm", "this afternoon")
_MOCK_THEMES = ("service disruption", "health incident", "security incident", "crowding")
_MOCK_FILLERS = (
    "franchement c'est abusé",
    "personne ne dit rien",
    "on attend toujours",
    "encore une fois",
    "journée compliquée",
)


class MockBackend:
    """Rule-based deterministic responder for desk-scale runs.

    Annotation requests get a hash-derived but schema-valid tag block;
    reasoning requests converge to the bound judgement when one is given;
    generation requests compose a tweet embedding the bound annotation
    fields, so downstream stages can assert the linkage.
    """

    def __init__(self, seed: int = 0, model_name: str = "mock"):
        self.seed = seed
        self.model_name = model_name

    def complete(self, prompt: str, request: CompletionRequest) -> Completion:
        handler = {
            "linguistic_annotation": self._annotate,
            "distress_reasoning": self._reason,
            "draft_generation": self._generate,
        }.get(request.template_name, self._echo)
        text = handler(request.bindings)
        return Completion(
            text=text,
            usage=Usage(_estimate_tokens(prompt), _estimate_tokens(text)),
        )

    def _h(self, *parts: str) -> int:
        return _digest(str(self.seed), *parts)

    def _annotate(self, bindings: dict[str, str]) -> str:
        tweet = bindings.get("tweet", "")
        h = self._h("annotate", tweet)
        tags = [
            f"<event>{_MOCK_EVENTS[h % len(_MOCK_EVENTS)]}</event>",
        ]
        if h >> 3 & 1:
            tags.append(f"<location>{_MOCK_LOCATIONS[(h >> 4) % len(_MOCK_LOCATIONS)]}</location>")
        if h >> 6 & 1:
            tags.append(f"<time>{_MOCK_TIMES[(h >> 7) % len(_MOCK_TIMES)]}</time>")
        tags.append(
            f"<language_register>{LANGUAGE_REGISTERS[(h >> 9) % len(LANGUAGE_REGISTERS)]}"
            "</language_register>"
        )
        if h >> 12 & 1:
            tags.append("<language_switching>french, english</language_switching>")
        tags.append(f"<emotion>{EMOTIONS[(h >> 13) % len(EMOTIONS)]}</emotion>")
        if h >> 16 & 1:
            tags.append(f"<tone>{TONES[(h >> 17) % len(TONES)]}</tone>")
        tags.append(f"<intensity>{INTENSITIES[(h >> 19) % len(INTENSITIES)]}</intensity>")
        intent = INTENTS[(h >> 21) % len(INTENTS)].replace("_", " ")
        tags.append(f"<intent>{intent}</intent>")
        tags.append(f"<theme>{_MOCK_THEMES[(h >> 24) % len(_MOCK_THEMES)]}</theme>")
        body = "\n".join(tags)
        return f"### Analysis ###\nShort recontextualization of the tweet.\n\n### Annotation ###\n{body}"

    def _reason(self, bindings: dict[str, str]) -> str:
        tweet = bindings.get("tweet", "")
        bound = bindings.get("judgement", "").strip().lower()
        h = self._h("reason", tweet)
        judgment = bound if bound in JUDGMENTS else JUDGMENTS[h % len(JUDGMENTS)]
        grade = 1 + (h >> 4) % 10
        span = tweet.strip().split("\n")[0][:60] if tweet.strip() else "(empty)"
        return (
            "### Text stance & pragmatics ###\n"
            f'First-person report, literal tone. Anchored by "{span}".\n\n'
            "### Distress ###\n"
            "The quoted spans are weighed against the criteria above. "
            f"Final answer: **{judgment}**\n\n"
            "### Semiotic potential ###\n"
            f"Grade: {grade}. Cues are concrete but limited to a single sentence."
        )

    def _generate(self, bindings: dict[str, str]) -> str:
        annotation = bindings.get("annotation", "")
        h = self._h("generate", annotation, bindings.get("text", ""))
        fields = {
            m.group(1): m.group(2)
            for m in re.finditer(r"<([a-z_]+)>(.*?)</\1>", annotation)
        }
        parts = [fields.get("event", "Un trajet comme les autres")]
        if "location" in fields:
            parts.append(f"à {fields['location']}")
        if "time" in fields:
            parts.append(f"({fields['time']})")
        parts.append("-")
        parts.append(_MOCK_FILLERS[h % len(_MOCK_FILLERS)])
        if "emotion" in fields:
            parts.append(f"#{fields['emotion']}")
        return " ".join(parts)

    def _echo(self, bindings: dict[str, str]) -> str:
        keys = ", ".join(sorted(bindings))
        return f"mock completion (bindings: {keys})"


class RemoteBackend:
    """Chat-completion style JSON POST client."""

    def __init__(self, descriptor: BackendDescriptor, transport: httpx.BaseTransport | None = None):
        self.descriptor = descriptor.validate()
        headers = {}
        if descriptor.api_key_env:
            key = os.environ.get(descriptor.api_key_env)
            if not key:
                raise GatewayError(f"api key env var {descriptor.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(transport=transport, headers=headers, timeout=60.0)

    def complete(self, prompt: str, request: CompletionRequest) -> Completion:
        payload = {
            "model": self.descriptor.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.temperature,
            "repetition_penalty": request.repetition_penalty,
            "max_tokens": request.max_tokens,
        }
        try:
            response = self._client.post(self.descriptor.endpoint, json=payload)
        except httpx.TransportError as exc:
            raise _Retryable(f"transport failure: {exc}") from exc
        if response.status_code in _RETRYABLE_STATUS or response.status_code >= 500:
            raise _Retryable(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise GatewayError(f"HTTP {response.status_code}: {response.text[:200]}")
        body = response.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        return Completion(
            text=text,
            usage=Usage(
                prompt_tokens=int(usage.get("prompt_tokens", _estimate_usage_tokens(prompt))),
                completion_tokens=int(usage.get("completion_tokens", _estimate_usage_tokens(text))),
            ),
        )

    def close(self) -> None:
        self._client.close()


def _estimate_usage_tokens(text: str) -> int:
    # backend did not report usage; fall back to the packing tokenizer
    from .tokenizer import default_tokenizer

    return default_tokenizer().count(text)


class _Retryable(GatewayError):
    pass


def build_backend(descriptor: BackendDescriptor, transport=None):
    descriptor.validate()
    if descriptor.kind == "mock":
        return MockBackend(seed=descriptor.seed, model_name=descriptor.model_name)
    return RemoteBackend(descriptor, transport=transport)


@dataclass
class _Entry:
    descriptor: BackendDescriptor
    backend: object
    gate: threading.BoundedSemaphore


class Gateway:
    """Shared front to all configured backends.

    Holds one concurrency gate per backend so no more than
    `max_in_flight` requests are ever outstanding against it, regardless
    of how many worker threads are submitting.
    """

    def __init__(self, sleep: Callable[[float], None] = time.sleep):
        self._entries: dict[str, _Entry] = {}
        self._templates: dict[str, PromptTemplate] = {}
        self._sleep = sleep

    def register(self, name: str, descriptor: BackendDescriptor, backend=None, transport=None):
        descriptor.validate()
        if backend is None:
            backend = build_backend(descriptor, transport=transport)
        self._entries[name] = _Entry(
            descriptor=descriptor,
            backend=backend,
            gate=threading.BoundedSemaphore(descriptor.max_in_flight),
        )
        return self

    def backend_names(self) -> list[str]:
        return sorted(self._entries)

    def _template(self, name: str) -> PromptTemplate:
        if name not in self._templates:
            self._templates[name] = load_template(name)
        return self._templates[name]

    def complete(self, backend_name: str, request: CompletionRequest) -> Completion:
        request.validate()
        try:
            entry = self._entries[backend_name]
        except KeyError:
            raise GatewayError(f"unknown backend: {backend_name!r}") from None
        prompt = render_prompt(self._template(request.template_name), request.bindings)
        attempts = max(1, entry.descriptor.retry_max_attempts)
        last_failure: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                delay = entry.descriptor.retry_base_backoff * (2 ** (attempt - 1))
                log.warning(
                    "retrying %s (attempt %d/%d) after %s",
                    backend_name, attempt + 1, attempts, last_failure,
                )
                self._sleep(delay)
            with entry.gate:
                try:
                    return entry.backend.complete(prompt, request)
                except _Retryable as exc:
                    last_failure = exc
        raise BackendUnavailable(
            f"backend {backend_name!r} failed after {attempts} attempts: {last_failure}"
        )

    def complete_many(
        self,
        backend_name: str,
        requests: Sequence[CompletionRequest],
        jobs: int | None = None,
    ) -> list[Completion]:
        """Complete a batch, preserving request order in the results."""
        if not requests:
            return []
        entry = self._entries.get(backend_name)
        if entry is None:
            raise GatewayError(f"unknown backend: {backend_name!r}")
        workers = jobs or entry.descriptor.max_in_flight
        if workers <= 1 or len(requests) == 1:
            return [self.complete(backend_name, r) for r in requests]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda r: self.complete(backend_name, r), requests))


def probe(descriptor: BackendDescriptor, transport=None) -> Completion:
    """Issue one canary annotation request against a backend."""
    gateway = Gateway().register("probe", descriptor, transport=transport)
    request = CompletionRequest(
        template_name="linguistic_annotation",
        bindings={"tweet": "Le métro est à l'heure ce matin, merci."},
        max_tokens=256,
    )
    return gateway.complete("probe", request)
