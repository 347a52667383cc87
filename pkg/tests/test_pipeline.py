from __future__ import annotations

import hashlib
import json

import pytest

from distresskit import jsonl
from distresskit.gateway import (
    BackendDescriptor,
    BackendUnavailable,
    Completion,
    CompletionRequest,
    Gateway,
    MockBackend,
    Usage,
)
from distresskit.pipeline import (
    ANNOTATED_FILE,
    DEDUP_REPORT_FILE,
    KEPT_FILE,
    PACKING_MANIFEST_FILE,
    PipelineConfig,
    PipelineError,
    SEQUENCES_FILE,
    TRAINING_MANIFEST_FILE,
    build_gateway,
    run_annotation_stage,
    run_generation_stage,
    run_pipeline,
)
from distresskit.tokenizer import default_tokenizer

from conftest import make_seed_rows


def _mock_gateway(seed=0):
    descriptor = BackendDescriptor(kind="mock", seed=seed, max_in_flight=4)
    gateway = Gateway()
    for name in ("annotator", "reasoner", "generator"):
        gateway.register(name, descriptor)
    return gateway


def _config(tmp_path, n_seeds=40, mix=0.0, **overrides) -> PipelineConfig:
    seeds_path = tmp_path / "seeds.jsonl"
    jsonl.write_jsonl(seeds_path, make_seed_rows(n_seeds, with_labels=True))
    config = PipelineConfig(seeds_path=str(seeds_path), mix=mix, **overrides)
    return config.validate()


class GarblingBackend:
    """Wraps the mock and garbles a deterministic subset of outputs."""

    def __init__(self, every: int, seed=0):
        self.inner = MockBackend(seed=seed)
        self.every = every

    def complete(self, prompt, request):
        out = self.inner.complete(prompt, request)
        tweet = request.bindings.get("tweet", "")
        h = int.from_bytes(hashlib.blake2b(tweet.encode(), digest_size=4).digest(), "big")
        if h % self.every == 0:
            return Completion(text="%% garbled output %%", usage=out.usage)
        return out


class FailAfterBackend:
    """Simulates backend exhaustion partway through a stage."""

    def __init__(self, n_calls, seed=0):
        self.inner = MockBackend(seed=seed)
        self.remaining = n_calls

    def complete(self, prompt, request):
        if self.remaining <= 0:
            raise BackendUnavailable("backend exhausted")
        self.remaining -= 1
        return self.inner.complete(prompt, request)


class EchoSeedBackend:
    """Generator that reproduces the seed text verbatim (via the reasoning
    binding's quoted span is not available, so tests pass the seed text)."""

    def __init__(self, mapping):
        self.mapping = mapping

    def complete(self, prompt, request):
        # the reasoning draft quotes the seed; tests key on a marker instead
        key = request.bindings["text"]
        return Completion(text=self.mapping[key], usage=Usage(1, 1))


class TestAnnotationStage:
    def test_all_seeds_annotated_with_mock(self, tmp_path):
        seeds = make_seed_rows(60, with_labels=True)
        report = run_annotation_stage(
            seeds, _mock_gateway(), PipelineConfig(), str(tmp_path / "ann.jsonl")
        )
        assert report.processed == 60
        assert report.failed == 0
        rows = list(jsonl.read_jsonl(tmp_path / "ann.jsonl"))
        assert len(rows) == 60
        assert all(r["parse_ok"] for r in rows)
        assert all(r["judgment"] in ("present", "absent", "external") for r in rows)

    def test_empty_seed_stream(self, tmp_path):
        report = run_annotation_stage([], _mock_gateway(), PipelineConfig(),
                                      str(tmp_path / "ann.jsonl"))
        assert report.processed == 0
        assert list(jsonl.read_jsonl(tmp_path / "ann.jsonl")) == []

    def test_garbled_outputs_counted_not_fatal(self, tmp_path):
        seeds = make_seed_rows(80)
        gateway = Gateway()
        garbler = GarblingBackend(every=5)
        gateway.register("annotator", BackendDescriptor(kind="mock"), backend=garbler)
        gateway.register("reasoner", BackendDescriptor(kind="mock"), backend=MockBackend())
        report = run_annotation_stage(seeds, gateway, PipelineConfig(),
                                      str(tmp_path / "ann.jsonl"))
        rows = list(jsonl.read_jsonl(tmp_path / "ann.jsonl"))
        garbled = [r for r in rows if not r["parse_ok"]]
        assert report.failed == len(garbled) > 0
        assert report.processed == 80
        # raw output retained for every failure
        assert all(r["raw_annotation"].startswith("%%") for r in garbled)

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        seeds = make_seed_rows(50, with_labels=True)
        straight = tmp_path / "straight.jsonl"
        run_annotation_stage(seeds, _mock_gateway(), PipelineConfig(), str(straight))

        # interrupted run: the reasoner dies partway through the second chunk
        interrupted = tmp_path / "resumed.jsonl"
        gateway = Gateway()
        gateway.register("annotator", BackendDescriptor(kind="mock"), backend=MockBackend())
        gateway.register("reasoner", BackendDescriptor(kind="mock"),
                         backend=FailAfterBackend(40))
        with pytest.raises(BackendUnavailable):
            run_annotation_stage(seeds, gateway, PipelineConfig(), str(interrupted))
        written = list(jsonl.read_jsonl(interrupted))
        assert 0 < len(written) < 50

        report = run_annotation_stage(seeds, _mock_gateway(), PipelineConfig(),
                                      str(interrupted))
        assert report.resumed_from == len(written)
        resumed_rows = list(jsonl.read_jsonl(interrupted))
        straight_rows = list(jsonl.read_jsonl(straight))
        assert resumed_rows == straight_rows

    def test_recovers_from_torn_write(self, tmp_path):
        seeds = make_seed_rows(10, with_labels=True)
        out = tmp_path / "ann.jsonl"
        run_annotation_stage(seeds[:4], _mock_gateway(), PipelineConfig(), str(out))
        with open(out, "a") as f:
            f.write('{"seed_id": "torn')  # crash mid-line
        report = run_annotation_stage(seeds, _mock_gateway(), PipelineConfig(), str(out))
        assert report.resumed_from == 4
        rows = list(jsonl.read_jsonl(out))
        assert [r["seed_id"] for r in rows] == [s["id"] for s in seeds]


class TestGenerationStage:
    def _annotated(self, tmp_path, n=30):
        seeds = make_seed_rows(n, with_labels=True)
        path = tmp_path / "ann.jsonl"
        run_annotation_stage(seeds, _mock_gateway(), PipelineConfig(), str(path))
        return list(jsonl.read_jsonl(path))

    def test_one_synthetic_per_input_with_provenance(self, tmp_path):
        rows = self._annotated(tmp_path)
        out = tmp_path / "syn.jsonl"
        report = run_generation_stage(rows, _mock_gateway(), PipelineConfig(), str(out))
        synthetic = list(jsonl.read_jsonl(out))
        assert report.processed == len(rows) == len(synthetic)
        assert all(s["phase"] == "synthetic" for s in synthetic)
        assert [s["seed_ref"] for s in synthetic] == [r["seed_id"] for r in rows]
        assert all(s["id"] == f"syn-{s['seed_ref']}" for s in synthetic)

    def test_bound_location_appears_in_generated_text(self, tmp_path):
        rows = self._annotated(tmp_path, n=40)
        with_location = [r for r in rows if r["annotation"].get("location")]
        assert with_location, "mock should emit locations for some seeds"
        out = tmp_path / "syn.jsonl"
        run_generation_stage(rows, _mock_gateway(), PipelineConfig(), str(out))
        synthetic = {s["seed_ref"]: s for s in jsonl.read_jsonl(out)}
        for row in with_location:
            assert row["annotation"]["location"] in synthetic[row["seed_id"]]["text"]

    def test_parse_failures_are_skipped(self, tmp_path):
        rows = self._annotated(tmp_path, n=10)
        rows[3]["parse_ok"] = False
        out = tmp_path / "syn.jsonl"
        report = run_generation_stage(rows, _mock_gateway(), PipelineConfig(), str(out))
        assert report.processed == 9
        assert all(s["seed_ref"] != rows[3]["seed_id"] for s in jsonl.read_jsonl(out))


class TestFullPipeline:
    def test_stage_all_runs_and_accounts(self, tmp_path, generalist_corpus):
        generalist_path, _ = generalist_corpus
        config = _config(tmp_path, n_seeds=40, mix=0.5,
                         generalist_path=str(generalist_path))
        out_dir = tmp_path / "out"
        summary = run_pipeline(config, str(out_dir), "all")
        assert [s["stage"] for s in summary["stages"]] == [
            "annotate", "generate", "dedup", "pack",
        ]
        for name in (ANNOTATED_FILE, KEPT_FILE, DEDUP_REPORT_FILE,
                     SEQUENCES_FILE, PACKING_MANIFEST_FILE, TRAINING_MANIFEST_FILE):
            assert (out_dir / name).exists()
        manifest = json.loads((out_dir / PACKING_MANIFEST_FILE).read_text())
        assert manifest["tokens_per_step"] == 262_144

    def test_echoing_generator_is_dropped_by_dedup(self, tmp_path):
        config = _config(tmp_path, n_seeds=12)
        out_dir = tmp_path / "out"
        seeds = make_seed_rows(12, with_labels=True)

        gateway = Gateway()
        gateway.register("annotator", BackendDescriptor(kind="mock"), backend=MockBackend())
        gateway.register("reasoner", BackendDescriptor(kind="mock"), backend=MockBackend())

        class EchoGenerator:
            def complete(self, prompt, request):
                # reproduce the seed verbatim: the reasoning draft quotes it
                for seed in seeds:
                    if seed["text"][:60] in request.bindings["text"]:
                        return Completion(text=seed["text"], usage=Usage(1, 1))
                return Completion(text="fresh text entirely unrelated", usage=Usage(1, 1))

        gateway.register("generator", BackendDescriptor(kind="mock"), backend=EchoGenerator())
        run_pipeline(config, str(out_dir), "all", gateway=gateway)
        report = json.loads((out_dir / DEDUP_REPORT_FILE).read_text())
        assert report["dropped"] == 12
        assert report["kept"] == 0

    def test_provenance_totality(self, tmp_path):
        config = _config(tmp_path, n_seeds=50)
        out_dir = tmp_path / "out"
        gateway = Gateway()
        gateway.register("annotator", BackendDescriptor(kind="mock"),
                         backend=GarblingBackend(every=7))
        gateway.register("reasoner", BackendDescriptor(kind="mock"), backend=MockBackend())
        gateway.register("generator", BackendDescriptor(kind="mock"), backend=MockBackend())
        run_pipeline(config, str(out_dir), "all", gateway=gateway)

        annotated = list(jsonl.read_jsonl(out_dir / ANNOTATED_FILE))
        synthetic = list(jsonl.read_jsonl(out_dir / "synthetic.jsonl"))
        kept = list(jsonl.read_jsonl(out_dir / KEPT_FILE))
        report = json.loads((out_dir / DEDUP_REPORT_FILE).read_text())

        failures = {r["seed_id"] for r in annotated if not r["parse_ok"]}
        assert failures, "garbler should cause some failures"
        # every seed is accounted for exactly once
        assert len(annotated) == 50
        assert {s["seed_ref"] for s in synthetic} == {
            r["seed_id"] for r in annotated if r["parse_ok"]
        }
        dropped_ids = {pair[0] for pair in report["dropped_pairs"]}
        kept_ids = {s["id"] for s in kept}
        assert dropped_ids | kept_ids == {s["id"] for s in synthetic}
        assert not dropped_ids & kept_ids

    def test_single_stage_selection(self, tmp_path):
        config = _config(tmp_path, n_seeds=8)
        out_dir = tmp_path / "out"
        summary = run_pipeline(config, str(out_dir), "annotate")
        assert [s["stage"] for s in summary["stages"]] == ["annotate"]
        assert not (out_dir / "synthetic.jsonl").exists()

    def test_unknown_stage_rejected(self, tmp_path):
        config = _config(tmp_path, n_seeds=4)
        with pytest.raises(PipelineError, match="unknown stage"):
            run_pipeline(config, str(tmp_path / "o"), "train")


class TestConfig:
    def test_file_roundtrip(self, tmp_path):
        config = PipelineConfig(
            seeds_path="seeds.jsonl", generalist_path="g.jsonl", epochs=2,
            dedup_threshold=0.7, mix=0.25, reasoning_language="fr",
            stages=("annotate", "pack"), seed=11,
        )
        path = tmp_path / "pipeline.conf"
        config.to_file(str(path))
        assert PipelineConfig.from_file(str(path)) == config

    def test_mix_requires_generalist(self):
        with pytest.raises(PipelineError, match="generalist"):
            PipelineConfig(seeds_path="s", mix=0.5).validate()

    def test_build_gateway_selects_reasoner_language(self):
        config = PipelineConfig(seeds_path="s", mix=0.0, reasoning_language="fr")
        gateway = build_gateway(config)
        assert gateway.backend_names() == ["annotator", "generator", "reasoner"]
