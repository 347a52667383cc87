"""Synthetic-data pipeline orchestration.

Four batch stages run in order: annotate seeds (linguistic tags plus a
distress reasoning trace), generate one synthetic tweet per annotated seed,
filter near-duplicates of the seeds, and pack the surviving tweets with
their reasoning traces (optionally mixed with generalist data) into
fixed-length training sequences.

Stage outputs are append-only JSONL files with a sidecar cursor, so a
killed stage resumes at the last durably written row and, with mock
backends, reproduces exactly the rows an uninterrupted run would have
written. Dedup and packing re-derive their state from stage outputs and
simply rerun.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from . import jsonl, kvconfig
from .annotations import (
    AnnotationError,
    JUDGMENTS,
    LinguisticAnnotation,
    parse_annotation,
    parse_distress_output,
    render_annotation,
)
from .corpus import LanguageTag, Phase, TweetRecord
from .dedup import DedupReport, SeedIndex, filter_near_duplicates
from .gateway import BackendDescriptor, CompletionRequest, Gateway
from .packing import PackingManifest, make_example, mix_examples, pack_examples
from .tokenizer import BpeTokenizer, default_tokenizer
from .train_manifest import build_manifest, emit_training_manifest

log = logging.getLogger(__name__)

STAGES = ("annotate", "generate", "dedup", "pack")
_CHUNK = 32

ANNOTATED_FILE = "annotated.jsonl"
SYNTHETIC_FILE = "synthetic.jsonl"
KEPT_FILE = "kept.jsonl"
DEDUP_REPORT_FILE = "dedup_report.json"
SEQUENCES_FILE = "packed_sequences.jsonl"
PACKING_MANIFEST_FILE = "packing_manifest.json"
TRAINING_MANIFEST_FILE = "training_manifest.json"


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    seeds_path: str = ""
    generalist_path: str | None = None
    annotator_backend: str = "mock"
    reasoner_en_backend: str = "mock"
    reasoner_fr_backend: str = "mock"
    generator_backend: str = "mock"
    stages: tuple[str, ...] = STAGES
    context_length: int = 2048
    micro_batch: int = 4
    grad_accum: int = 8
    data_parallel: int = 4
    epochs: int = 3
    dedup_threshold: float = 0.65
    mix: float = 0.5
    reasoning_language: str = "en"
    pack_language_filter: str = "all"
    max_in_flight: int = 4
    seed: int = 0

    @property
    def tokens_per_step(self) -> int:
        return self.context_length * self.micro_batch * self.grad_accum * self.data_parallel

    def validate(self) -> "PipelineConfig":
        if self.epochs < 1:
            raise PipelineError("epochs must be >= 1")
        if not 0.0 <= self.mix < 1.0:
            raise PipelineError("mix must be in [0, 1)")
        if self.reasoning_language not in ("en", "fr"):
            raise PipelineError("reasoning_language must be en or fr")
        if self.pack_language_filter not in ("all", "en", "fr"):
            raise PipelineError("pack_language_filter must be all, en or fr")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise PipelineError(f"unknown stages: {sorted(unknown)}")
        if self.mix > 0 and not self.generalist_path:
            raise PipelineError("mix > 0 requires generalist_path")
        return self

    @classmethod
    def from_file(cls, path: str) -> "PipelineConfig":
        kv = kvconfig.load_kv(path)
        cfg = cls()
        return cls(
            seeds_path=kv.get("seeds_path", cfg.seeds_path),
            generalist_path=kv.get("generalist_path") or None,
            annotator_backend=kv.get("annotator_backend", cfg.annotator_backend),
            reasoner_en_backend=kv.get("reasoner_en_backend", cfg.reasoner_en_backend),
            reasoner_fr_backend=kv.get("reasoner_fr_backend", cfg.reasoner_fr_backend),
            generator_backend=kv.get("generator_backend", cfg.generator_backend),
            stages=tuple(s.strip() for s in kv.get("stages", ",".join(STAGES)).split(",") if s.strip()),
            context_length=int(kv.get("context_length", cfg.context_length)),
            micro_batch=int(kv.get("micro_batch", cfg.micro_batch)),
            grad_accum=int(kv.get("grad_accum", cfg.grad_accum)),
            data_parallel=int(kv.get("data_parallel", cfg.data_parallel)),
            epochs=int(kv.get("epochs", cfg.epochs)),
            dedup_threshold=float(kv.get("dedup_threshold", cfg.dedup_threshold)),
            mix=float(kv.get("mix", cfg.mix)),
            reasoning_language=kv.get("reasoning_language", cfg.reasoning_language),
            pack_language_filter=kv.get("pack_language_filter", cfg.pack_language_filter),
            max_in_flight=int(kv.get("max_in_flight", cfg.max_in_flight)),
            seed=int(kv.get("seed", cfg.seed)),
        ).validate()

    def to_file(self, path: str) -> None:
        items = {
            "seeds_path": self.seeds_path,
            "generalist_path": self.generalist_path or "",
            "annotator_backend": self.annotator_backend,
            "reasoner_en_backend": self.reasoner_en_backend,
            "reasoner_fr_backend": self.reasoner_fr_backend,
            "generator_backend": self.generator_backend,
            "stages": ",".join(self.stages),
            "context_length": str(self.context_length),
            "micro_batch": str(self.micro_batch),
            "grad_accum": str(self.grad_accum),
            "data_parallel": str(self.data_parallel),
            "epochs": str(self.epochs),
            "dedup_threshold": str(self.dedup_threshold),
            "mix": str(self.mix),
            "reasoning_language": self.reasoning_language,
            "pack_language_filter": self.pack_language_filter,
            "max_in_flight": str(self.max_in_flight),
            "seed": str(self.seed),
        }
        kvconfig.save_kv(path, items)


def build_gateway(config: PipelineConfig) -> Gateway:
    """Register the annotator, active reasoner, and generator backends."""
    gateway = Gateway()
    reasoner_spec = (
        config.reasoner_en_backend if config.reasoning_language == "en"
        else config.reasoner_fr_backend
    )
    for name, spec in (
        ("annotator", config.annotator_backend),
        ("reasoner", reasoner_spec),
        ("generator", config.generator_backend),
    ):
        if spec == "mock":
            descriptor = BackendDescriptor(
                kind="mock", model_name=f"mock-{name}",
                max_in_flight=config.max_in_flight, seed=config.seed,
            )
        else:
            descriptor = BackendDescriptor.from_config(spec)
        gateway.register(name, descriptor)
    return gateway


@dataclass
class StageReport:
    stage: str
    processed: int = 0
    succeeded: int = 0
    failed: int = 0
    resumed_from: int = 0

    def to_obj(self) -> dict:
        return {
            "stage": self.stage,
            "processed": self.processed,
            "succeeded": self.succeeded,
            "failed": self.failed,
            "resumed_from": self.resumed_from,
        }


class _StageLog:
    """Append-only JSONL output with a sidecar cursor.

    The cursor records how many input items are fully represented in the
    output. On open, a trailing partial line (a crash mid-write) is
    truncated away and the cursor is clamped to the rows actually on disk.
    """

    def __init__(self, path: str):
        self.path = path
        self.cursor_path = path + ".cursor"
        self.rows_on_disk = 0
        self._recover()
        self._fh = open(self.path, "a", encoding="utf-8")

    def _recover(self) -> None:
        if not os.path.exists(self.path):
            return
        good_end = 0
        count = 0
        with open(self.path, "rb") as f:
            data = f.read()
        pos = 0
        while True:
            nl = data.find(b"\n", pos)
            if nl == -1:
                break
            line = data[pos:nl]
            try:
                json.loads(line)
            except ValueError:
                break
            count += 1
            good_end = nl + 1
            pos = nl + 1
        if good_end != len(data):
            log.warning("%s: truncating %d trailing bytes from interrupted write",
                        self.path, len(data) - good_end)
            with open(self.path, "r+b") as f:
                f.truncate(good_end)
        self.rows_on_disk = count

    def append(self, row: dict) -> None:
        jsonl.append_jsonl_line(self._fh, row)
        self.rows_on_disk += 1
        with open(self.cursor_path, "w", encoding="utf-8") as f:
            f.write(str(self.rows_on_disk))

    def close(self) -> None:
        self._fh.close()


def _chunks(items: list, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


def read_seeds(path: str) -> list[dict]:
    """Seed rows as raw objects; an optional `distress` key rides along."""
    return list(jsonl.read_jsonl(path))


def run_annotation_stage(
    seeds: Iterable[dict],
    gateway: Gateway,
    config: PipelineConfig,
    out_path: str,
) -> StageReport:
    """Annotate every seed: linguistic tags plus a distress reasoning trace.

    Emits exactly one row per seed, parse failures included (with the raw
    model output retained), so the output row count doubles as the resume
    cursor.
    """
    seeds = list(seeds)
    stage_log = _StageLog(out_path)
    report = StageReport(stage="annotate", resumed_from=stage_log.rows_on_disk)
    try:
        pending = seeds[stage_log.rows_on_disk:]
        if stage_log.rows_on_disk:
            log.info("annotate: resuming at row %d of %d", stage_log.rows_on_disk, len(seeds))
        for chunk in _chunks(pending, _CHUNK):
            ann_requests = [
                CompletionRequest("linguistic_annotation", {"tweet": s["text"]})
                for s in chunk
            ]
            reason_requests = [
                CompletionRequest(
                    "distress_reasoning",
                    {
                        "tweet": s["text"],
                        "judgement": s.get("distress") if s.get("distress") in JUDGMENTS else "unknown",
                    },
                )
                for s in chunk
            ]
            ann_out = gateway.complete_many("annotator", ann_requests)
            reason_out = gateway.complete_many("reasoner", reason_requests)
            for seed, ann, reason in zip(chunk, ann_out, reason_out):
                row = _annotation_row(seed, ann.text, reason.text, config.reasoning_language)
                stage_log.append(row)
                report.processed += 1
                if row["parse_ok"]:
                    report.succeeded += 1
                else:
                    report.failed += 1
    finally:
        stage_log.close()
    return report


def _annotation_row(seed: dict, raw_annotation: str, raw_reasoning: str, lang: str) -> dict:
    annotation_obj = None
    warnings: list[str] = []
    try:
        annotation, warnings = parse_annotation(raw_annotation)
        annotation_obj = annotation.to_obj()
    except AnnotationError as exc:
        warnings = [str(exc)]
    outcome, label = parse_distress_output(raw_reasoning)
    parse_ok = annotation_obj is not None and outcome.judgment is not None
    return {
        "seed_id": seed["id"],
        "seed_text": seed["text"],
        "raw_annotation": raw_annotation,
        "annotation": annotation_obj,
        "annotation_warnings": warnings,
        "raw_reasoning": raw_reasoning,
        "judgment": outcome.judgment,
        "semiotic_grade": outcome.semiotic_grade,
        "binary_label": label.value,
        "label_source": label.source,
        "parse_ok": parse_ok,
        "reasoning_language": lang,
    }


def run_generation_stage(
    annotated_rows: Iterable[dict],
    gateway: Gateway,
    config: PipelineConfig,
    out_path: str,
) -> StageReport:
    """Generate one synthetic tweet per successfully annotated seed.

    Provenance is kept through `seed_ref` on every synthetic record.
    """
    ok_rows = [row for row in annotated_rows if row.get("parse_ok")]
    stage_log = _StageLog(out_path)
    report = StageReport(stage="generate", resumed_from=stage_log.rows_on_disk)
    try:
        pending = ok_rows[stage_log.rows_on_disk:]
        for chunk in _chunks(pending, _CHUNK):
            requests = []
            for row in chunk:
                annotation = LinguisticAnnotation.from_obj(row["annotation"])
                requests.append(CompletionRequest(
                    "draft_generation",
                    {"text": row["raw_reasoning"], "annotation": render_annotation(annotation)},
                ))
            completions = gateway.complete_many("generator", requests)
            for row, completion in zip(chunk, completions):
                text = completion.text.strip()
                record = TweetRecord(
                    id=f"syn-{row['seed_id']}",
                    text=text,
                    lang=LanguageTag("french"),
                    phase=Phase.SYNTHETIC,
                    seed_ref=row["seed_id"],
                )
                out = record.to_obj()
                out["reasoning_language"] = row["reasoning_language"]
                stage_log.append(out)
                report.processed += 1
                if text:
                    report.succeeded += 1
                else:
                    report.failed += 1
    finally:
        stage_log.close()
    return report


def run_dedup_stage(
    config: PipelineConfig,
    seeds: Iterable[dict],
    synthetic_path: str,
    kept_path: str,
    report_path: str,
    jobs: int = 1,
) -> DedupReport:
    """Filter synthetic tweets that sit too close to any generation seed."""
    index = SeedIndex.from_pairs((s["id"], s["text"]) for s in seeds)
    synthetic_rows = list(jsonl.read_jsonl(synthetic_path))
    candidates = [TweetRecord.from_obj(row) for row in synthetic_rows]
    kept, report = filter_near_duplicates(
        candidates, index, threshold=config.dedup_threshold, jobs=jobs
    )
    kept_ids = {r.id for r in kept}
    jsonl.write_jsonl(kept_path, (row for row in synthetic_rows if row["id"] in kept_ids))
    _write_json(report_path, report.to_obj())
    return report


def compose_training_text(tweet_text: str, reasoning: str) -> str:
    return f"{tweet_text}\n\n{reasoning}"


def run_pack_stage(
    config: PipelineConfig,
    annotated_path: str,
    kept_path: str,
    out_dir: str,
    tokenizer: BpeTokenizer | None = None,
) -> PackingManifest:
    """Assemble the training corpus and write sequences plus manifests."""
    tokenizer = tokenizer or default_tokenizer()
    reasoning_by_seed = {
        row["seed_id"]: row
        for row in jsonl.read_jsonl(annotated_path)
        if row.get("parse_ok")
    }
    synthetic = []
    for row in jsonl.read_jsonl(kept_path):
        seed_row = reasoning_by_seed.get(row.get("seed_ref"))
        if seed_row is None:
            raise PipelineError(f"kept record {row['id']} has no annotated seed")
        lang = row.get("reasoning_language", config.reasoning_language)
        if config.pack_language_filter != "all" and lang != config.pack_language_filter:
            continue
        synthetic.append(make_example(
            "synthetic_tweet_reasoning",
            compose_training_text(row["text"], seed_row["raw_reasoning"]),
            tokenizer,
            reasoning_language=lang,
        ))
    generalist: Iterable = ()
    if config.mix > 0:
        generalist = (
            make_example("generalist", row["text"], tokenizer)
            for row in jsonl.read_jsonl(config.generalist_path)
        )
    combined = mix_examples(synthetic, generalist, config.mix)
    sequences, manifest = pack_examples(
        combined,
        tokenizer,
        sequence_length=config.context_length,
        epochs=config.epochs,
        tokens_per_step=config.tokens_per_step,
        shuffle_seed=config.seed,
    )
    jsonl.write_jsonl(os.path.join(out_dir, SEQUENCES_FILE), ({"tokens": s} for s in sequences))
    _write_json(os.path.join(out_dir, PACKING_MANIFEST_FILE), manifest.to_obj())
    training = build_manifest(
        context_length=config.context_length,
        micro_batch=config.micro_batch,
        grad_accum=config.grad_accum,
        data_parallel=config.data_parallel,
        epochs=config.epochs,
    )
    emit_training_manifest(training, os.path.join(out_dir, TRAINING_MANIFEST_FILE))
    return manifest


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def run_pipeline(
    config: PipelineConfig,
    out_dir: str,
    stage: str = "all",
    gateway: Gateway | None = None,
    jobs: int = 1,
) -> dict:
    """Run one stage or every enabled stage; returns a summary object."""
    config.validate()
    if stage != "all" and stage not in STAGES:
        raise PipelineError(f"unknown stage: {stage!r}")
    os.makedirs(out_dir, exist_ok=True)
    selected = [s for s in STAGES if s in config.stages] if stage == "all" else [stage]
    if not selected:
        raise PipelineError("no stages enabled")
    summary: dict = {"stages": []}
    seeds = read_seeds(config.seeds_path)

    if gateway is None and any(s in selected for s in ("annotate", "generate")):
        gateway = build_gateway(config)

    annotated_path = os.path.join(out_dir, ANNOTATED_FILE)
    synthetic_path = os.path.join(out_dir, SYNTHETIC_FILE)
    kept_path = os.path.join(out_dir, KEPT_FILE)

    for name in selected:
        log.info("running stage: %s", name)
        if name == "annotate":
            report = run_annotation_stage(seeds, gateway, config, annotated_path)
            summary["stages"].append(report.to_obj())
        elif name == "generate":
            rows = list(jsonl.read_jsonl(annotated_path))
            report = run_generation_stage(rows, gateway, config, synthetic_path)
            summary["stages"].append(report.to_obj())
        elif name == "dedup":
            dedup_report = run_dedup_stage(
                config, seeds, synthetic_path, kept_path,
                os.path.join(out_dir, DEDUP_REPORT_FILE), jobs=jobs,
            )
            summary["stages"].append({
                "stage": "dedup",
                "candidates_in": dedup_report.candidates_in,
                "dropped": dedup_report.dropped,
                "kept": dedup_report.kept,
            })
        elif name == "pack":
            manifest = run_pack_stage(config, annotated_path, kept_path, out_dir)
            summary["stages"].append({"stage": "pack", **manifest.to_obj()})
    return summary
