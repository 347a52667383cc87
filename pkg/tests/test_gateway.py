from __future__ import annotations

import logging
import threading
from pathlib import Path

import httpx
import pytest

from distresskit.annotations import parse_annotation, parse_distress_output
from distresskit.gateway import (
    BackendDescriptor,
    BackendUnavailable,
    Completion,
    CompletionRequest,
    Gateway,
    GatewayError,
    MockBackend,
    Usage,
    probe,
)
from distresskit.prompts import PromptError, PromptTemplate, load_template, render_prompt

GOLDEN_DIR = Path(__file__).parent / "data"


class TestTemplates:
    @pytest.mark.parametrize("name,expected_placeholders", [
        ("distress_reasoning", ("tweet", "judgement")),
        ("linguistic_annotation", ("tweet",)),
        ("draft_generation", ("text", "annotation")),
    ])
    def test_shipped_templates_match_golden_files(self, name, expected_placeholders):
        template = load_template(name)
        golden = (GOLDEN_DIR / f"golden_{name}.txt").read_text(encoding="utf-8")
        assert template.body == golden
        assert set(template.placeholders) == set(expected_placeholders)

    def test_render_substitutes_all_bindings(self):
        template = load_template("distress_reasoning")
        out = render_prompt(template, {"tweet": "X", "judgement": "absent"})
        assert "You have been submitted the following tweet:\nX\n" in out
        assert "You also no in advance the final judgement:\nabsent\n" in out
        assert "{tweet}" not in out and "{judgement}" not in out

    def test_missing_binding_names_placeholder(self):
        template = load_template("distress_reasoning")
        with pytest.raises(PromptError, match="unbound placeholder: judgement"):
            render_prompt(template, {"tweet": "X"})

    def test_zero_placeholder_template_unchanged(self):
        template = PromptTemplate(name="linguistic_annotation", body="static body, no slots")
        assert render_prompt(template, {}) == "static body, no slots"

    def test_extra_binding_warns(self, caplog):
        template = PromptTemplate(name="linguistic_annotation", body="{tweet}")
        with caplog.at_level(logging.WARNING):
            out = render_prompt(template, {"tweet": "t", "bogus": "y"})
        assert out == "t"
        assert any("bogus" in r.message for r in caplog.records)

    def test_unknown_template_name(self):
        with pytest.raises(PromptError):
            load_template("nonexistent")


def _mock_gateway(seed=0, max_in_flight=4) -> Gateway:
    descriptor = BackendDescriptor(kind="mock", seed=seed, max_in_flight=max_in_flight)
    return Gateway().register("m", descriptor)


class TestMockBackend:
    def test_same_request_twice_is_byte_identical(self):
        gateway = _mock_gateway()
        request = CompletionRequest("linguistic_annotation", {"tweet": "le métro est bloqué"})
        first = gateway.complete("m", request)
        second = gateway.complete("m", request)
        assert first.text == second.text
        assert first.usage == second.usage

    def test_different_seeds_differ(self):
        request = CompletionRequest("distress_reasoning", {"tweet": "abc", "judgement": "unknown"})
        a = _mock_gateway(seed=1).complete("m", request)
        b = _mock_gateway(seed=2).complete("m", request)
        assert a.text != b.text

    def test_annotation_output_parses_cleanly(self):
        gateway = _mock_gateway()
        for i in range(50):
            request = CompletionRequest("linguistic_annotation", {"tweet": f"tweet {i}"})
            annotation, _ = parse_annotation(gateway.complete("m", request).text)
            assert annotation.populated_fields()

    def test_reasoning_converges_to_bound_judgement(self):
        gateway = _mock_gateway()
        for judgement in ("present", "absent", "external"):
            request = CompletionRequest(
                "distress_reasoning", {"tweet": "un texte", "judgement": judgement}
            )
            outcome, _ = parse_distress_output(gateway.complete("m", request).text)
            assert outcome.judgment == judgement
            assert outcome.semiotic_grade in range(1, 11)

    def test_generation_embeds_annotation_fields(self):
        gateway = _mock_gateway()
        request = CompletionRequest("draft_generation", {
            "text": "reasoning draft",
            "annotation": "<event>Power cut</event><location>Saint-Paul station</location>",
        })
        text = gateway.complete("m", request).text
        assert "Saint-Paul station" in text


class _CountingBackend:
    """Tracks concurrent complete() calls to verify the in-flight bound."""

    def __init__(self, delay=0.001):
        self.lock = threading.Lock()
        self.active = 0
        self.max_active = 0
        self.calls = 0
        self.delay = delay

    def complete(self, prompt, request):
        import time

        with self.lock:
            self.active += 1
            self.calls += 1
            self.max_active = max(self.max_active, self.active)
        time.sleep(self.delay)
        with self.lock:
            self.active -= 1
        return Completion(text="ok", usage=Usage(1, 1))


class TestConcurrencyBound:
    def test_thousand_requests_never_exceed_max_in_flight(self):
        backend = _CountingBackend()
        descriptor = BackendDescriptor(kind="mock", max_in_flight=8)
        gateway = Gateway().register("m", descriptor, backend=backend)
        requests = [
            CompletionRequest("linguistic_annotation", {"tweet": f"t{i}"})
            for i in range(1000)
        ]
        results = gateway.complete_many("m", requests, jobs=32)
        assert len(results) == 1000
        assert backend.calls == 1000
        assert backend.max_active <= 8
        assert backend.max_active >= 2  # sanity: actually ran concurrently


def _transport(script):
    """httpx transport whose responses follow `script` (list of status or dict)."""
    calls = {"n": 0}

    def handler(request: httpx.Request) -> httpx.Response:
        step = script[min(calls["n"], len(script) - 1)]
        calls["n"] += 1
        if isinstance(step, int):
            return httpx.Response(step, json={"error": "nope"})
        return httpx.Response(200, json=step)

    return httpx.MockTransport(handler), calls


_OK_BODY = {
    "choices": [{"message": {"role": "assistant", "content": "### Distress ###\n**absent**"}}],
    "usage": {"prompt_tokens": 11, "completion_tokens": 7},
}


class TestRemoteBackend:
    def _gateway(self, script, attempts=3):
        transport, calls = _transport(script)
        descriptor = BackendDescriptor(
            kind="remote", endpoint="http://backend.test/v1/chat",
            model_name="m1", retry_max_attempts=attempts, retry_base_backoff=0.0,
        )
        gateway = Gateway(sleep=lambda s: None).register("r", descriptor, transport=transport)
        return gateway, calls

    def test_429_then_200_retries_once(self):
        gateway, calls = self._gateway([429, _OK_BODY])
        request = CompletionRequest("distress_reasoning", {"tweet": "x", "judgement": "absent"})
        completion = gateway.complete("r", request)
        assert completion.text.endswith("**absent**")
        assert completion.usage.prompt_tokens == 11
        assert calls["n"] == 2

    def test_server_errors_exhaust_retries(self):
        gateway, calls = self._gateway([500, 500, 500])
        request = CompletionRequest("linguistic_annotation", {"tweet": "x"})
        with pytest.raises(BackendUnavailable, match="HTTP 500"):
            gateway.complete("r", request)
        assert calls["n"] == 3

    def test_client_error_is_fatal_not_retried(self):
        gateway, calls = self._gateway([400, _OK_BODY])
        request = CompletionRequest("linguistic_annotation", {"tweet": "x"})
        with pytest.raises(GatewayError, match="HTTP 400"):
            gateway.complete("r", request)
        assert calls["n"] == 1

    def test_usage_estimated_when_reply_lacks_it(self):
        body = {"choices": [{"message": {"content": "bonjour le monde"}}]}
        gateway, _ = self._gateway([body])
        request = CompletionRequest("linguistic_annotation", {"tweet": "x"})
        completion = gateway.complete("r", request)
        assert completion.usage.completion_tokens > 0

    def test_remote_requires_endpoint(self):
        with pytest.raises(GatewayError, match="endpoint"):
            BackendDescriptor(kind="remote").validate()


class TestDescriptorConfig:
    def test_roundtrip(self, tmp_path):
        descriptor = BackendDescriptor(
            kind="remote", endpoint="http://h/v1", model_name="m",
            max_in_flight=2, retry_max_attempts=5, retry_base_backoff=0.1,
            api_key_env="MY_KEY", seed=3,
        )
        path = tmp_path / "backend.conf"
        descriptor.to_config(str(path))
        loaded = BackendDescriptor.from_config(str(path))
        assert loaded == descriptor
        assert "MY_KEY" in path.read_text()
        # the key itself is never written
        assert "secret" not in path.read_text()

    def test_probe_mock(self):
        completion = probe(BackendDescriptor(kind="mock", seed=1))
        annotation, _ = parse_annotation(completion.text)
        assert annotation.populated_fields()
