"""Single command-line entry point.

One subcommand per pipeline concern; JSON logs go to stderr, human-readable
tables to stdout. Exit codes: 0 success, 1 operational failure, 2 usage
error.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import sys

import click

from . import jsonl
from .annotations import DISTRESS, NO_DISTRESS
from .corpus import dehydrate, ingest_corpus, language_stats
from .crowd import (
    AttentionKey,
    ItemResponse,
    ScreeningReport,
    agreement_stats,
    aggregate_labels,
    assign_batches,
    screen_annotators,
)
from .dedup import SeedIndex, dedup_arithmetic_check, filter_near_duplicates
from .evaluation import (
    JudgeScore,
    aggregate_judge,
    judge_csv_rows,
    score_predictions,
    write_judge_csv,
)
from .gateway import BackendDescriptor, probe as gateway_probe
from .pipeline import PipelineConfig, run_pipeline
from .service import Campaign, SessionStore, create_app, default_attention_items

log = logging.getLogger("distresskit")

_OPERATIONAL_ERRORS = (ValueError, RuntimeError, OSError)


class _JsonLogFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return jsonl.dumps(payload)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLogFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper()))


def operational(fn):
    """Map operational failures to exit 1 with a machine-readable error."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _OPERATIONAL_ERRORS as exc:
            click.echo(jsonl.dumps({"error": type(exc).__name__, "detail": str(exc)}), err=True)
            raise SystemExit(1)

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline config file.")
@click.option("--log-level", default="warning",
              type=click.Choice(["debug", "info", "warning", "error"]))
@click.option("--seed", type=int, default=None, help="Seed for all randomized behavior.")
@click.option("--out-dir", type=click.Path(), default="out", help="Output directory.")
@click.option("--jobs", type=int, default=1, help="Worker count for parallel stages.")
@click.pass_context
def main(ctx, config_path, log_level, seed, out_dir, jobs):
    """Synthetic tweet pipeline and annotation-campaign toolkit."""
    _setup_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, out_dir=out_dir, jobs=jobs)


# -- corpus ---------------------------------------------------------------

@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default="jsonl")
@click.option("--out", "out_path", type=click.Path(), required=True)
@operational
def ingest(input_path, fmt, out_path):
    """Normalize a corpus file to canonical JSONL."""
    stream = ingest_corpus(input_path, fmt)
    count = jsonl.write_jsonl(out_path, (r.to_obj() for r in stream))
    click.echo(f"records: {count}  skipped: {stream.skipped}")


@main.command()
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default="jsonl")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write stats (.csv or .json by extension).")
@operational
def stats(input_path, fmt, out_path):
    """Corpus summary: totals, language shares, monthly volume."""
    result = language_stats(ingest_corpus(input_path, fmt))
    click.echo(f"total: {result.total}")
    for lang, (count, share) in result.by_language.items():
        click.echo(f"  {lang:<14} {count:>10}  {share * 100:5.1f}%")
    if out_path:
        if out_path.endswith(".json"):
            _write_json(out_path, result.to_obj())
        else:
            result.write_csv(out_path)


@main.command("dehydrate")
@click.argument("input_path", type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "csv"]), default="jsonl")
@click.option("--out", "out_path", type=click.Path(), required=True)
@operational
def dehydrate_cmd(input_path, fmt, out_path):
    """Export ids only (no text, no author fields)."""
    ids = dehydrate(ingest_corpus(input_path, fmt))
    jsonl.write_jsonl(out_path, ({"id": i} for i in ids))
    click.echo(f"ids: {len(ids)}")


# -- gateway ----------------------------------------------------------------

@main.command()
@click.option("--backend", "backend_path", type=click.Path(exists=True), required=True)
@operational
def probe(backend_path):
    """Issue one canary request against a configured backend."""
    descriptor = BackendDescriptor.from_config(backend_path)
    completion = gateway_probe(descriptor)
    click.echo(f"backend: {descriptor.model_name} ({descriptor.kind})")
    click.echo(f"usage: prompt={completion.usage.prompt_tokens} "
               f"completion={completion.usage.completion_tokens}")
    click.echo(completion.text[:200])


# -- dedup --------------------------------------------------------------

@main.command("dedup")
@click.option("--seeds", "seeds_path", type=click.Path(exists=True), required=True)
@click.option("--candidates", "candidates_path", type=click.Path(exists=True), required=True)
@click.option("--threshold", type=float, default=0.65, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--report", "report_path", type=click.Path(), required=True)
@click.option("--trigram-prefilter/--no-trigram-prefilter", default=None,
              help="Force the trigram gate on or off (default: on when threshold >= 0.5).")
@click.pass_context
@operational
def dedup_cmd(ctx, seeds_path, candidates_path, threshold, out_path, report_path,
              trigram_prefilter):
    """Filter candidates that near-duplicate any seed."""
    index = SeedIndex(ingest_corpus(seeds_path))
    candidates = list(ingest_corpus(candidates_path))
    kept, report = filter_near_duplicates(
        candidates, index, threshold,
        trigram_prefilter=trigram_prefilter, jobs=ctx.obj["jobs"],
    )
    jsonl.write_jsonl(out_path, (r.to_obj() for r in kept))
    _write_json(report_path, report.to_obj())
    check = dedup_arithmetic_check(report)
    if not check.ok:
        raise RuntimeError("; ".join(check.problems))
    click.echo(
        f"candidates: {report.candidates_in}  dropped: {report.dropped} "
        f"({report.drop_share * 100:.2f}%)  kept: {report.kept}"
    )


# -- pipeline -------------------------------------------------------------

@main.group()
def pipeline():
    """Synthetic pipeline stages."""


@pipeline.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--stage", type=click.Choice(["annotate", "generate", "dedup", "pack", "all"]),
              default="all", show_default=True)
@click.pass_context
@operational
def pipeline_run(ctx, config_path, stage):
    """Run pipeline stages against the configured backends."""
    path = config_path or ctx.obj.get("config_path")
    if not path:
        raise click.UsageError("pipeline run requires --config")
    config = PipelineConfig.from_file(path)
    if ctx.obj.get("seed") is not None:
        config.seed = ctx.obj["seed"]
    summary = run_pipeline(config, ctx.obj["out_dir"], stage=stage, jobs=ctx.obj["jobs"])
    for entry in summary["stages"]:
        click.echo(jsonl.dumps(entry))


# -- crowd ----------------------------------------------------------------

@main.group()
def crowd():
    """Annotation-campaign construction and quality control."""


@crowd.command("assign")
@click.option("--tweets", "tweets_path", type=click.Path(exists=True), required=True)
@click.option("--annotators", "annotators_path", type=click.Path(exists=True), required=True)
@click.option("--batch-size", type=int, default=50, show_default=True)
@click.option("--min-panel", type=int, default=9, show_default=True)
@click.option("--max-panel", type=int, default=11, show_default=True)
@click.option("--likert-scale", type=int, default=7, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
@operational
def crowd_assign(ctx, tweets_path, annotators_path, batch_size, min_panel, max_panel,
                 likert_scale, out_path):
    """Build the campaign file: batches, panels, texts, attention items."""
    seed = ctx.obj.get("seed") or 0
    tweets = {row["id"]: row["text"] for row in jsonl.read_jsonl(tweets_path)}
    annotators = [str(row["annotator_id"]) for row in jsonl.read_jsonl(annotators_path)]
    batches = assign_batches(
        list(tweets), annotators, batch_size=batch_size,
        min_panel=min_panel, max_panel=max_panel, seed=seed,
    )
    campaign = Campaign(
        seed=seed,
        likert_scale=likert_scale,
        batches=[b.to_obj() for b in batches],
        tweets=tweets,
        attention_items=default_attention_items(likert_scale),
    )
    _write_json(out_path, campaign.to_obj())
    sizes = sorted(len(b.annotator_ids) for b in batches)
    mean = sum(sizes) / len(sizes)
    click.echo(f"batches: {len(batches)}  panel sizes: {sizes[0]}..{sizes[-1]}  mean: {mean:.3f}")


def _load_campaign(path: str) -> Campaign:
    with open(path, encoding="utf-8") as f:
        return Campaign.from_obj(json.load(f))


def _load_responses(path: str) -> list[ItemResponse]:
    return [ItemResponse.from_obj(row) for row in jsonl.read_jsonl(path)]


def _screened_real_responses(responses_path: str, campaign: Campaign,
                             screening: ScreeningReport) -> list[ItemResponse]:
    attention_ids = {
        item.item_id for items in campaign.attention_items.values() for item in items
    }
    kept = set(screening.kept_ids)
    return [
        r for r in _load_responses(responses_path)
        if r.annotator_id in kept and r.tweet_id not in attention_ids
    ]


@crowd.command("screen")
@click.option("--responses", "responses_path", type=click.Path(exists=True), required=True)
@click.option("--campaign", "campaign_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@operational
def crowd_screen(responses_path, campaign_path, out_path):
    """Screen annotators: attention checks first, then speeders."""
    campaign = _load_campaign(campaign_path)
    responses = _load_responses(responses_path)
    keys = [
        AttentionKey(item.item_id, item.expected)
        for item in campaign.attention_items["distress_binary"]
    ]
    attention_keys = {r.annotator_id: keys for r in responses}
    report = screen_annotators(responses, attention_keys)
    _write_json(out_path, report.to_obj())
    click.echo(
        f"initial: {report.initial}  attention-failed: {len(report.failed_attention)}  "
        f"speeders: {len(report.speeders)}  final: {report.final}"
    )


@crowd.command("aggregate")
@click.option("--responses", "responses_path", type=click.Path(exists=True), required=True)
@click.option("--campaign", "campaign_path", type=click.Path(exists=True), required=True)
@click.option("--screening", "screening_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@operational
def crowd_aggregate(responses_path, campaign_path, screening_path, out_path, csv_path):
    """Majority-vote gold labels with the distress tie-break."""
    campaign = _load_campaign(campaign_path)
    screening = _load_screening(screening_path)
    responses = _screened_real_responses(responses_path, campaign, screening)
    labels = aggregate_labels(responses, expected_tweets=list(campaign.tweets))
    jsonl.write_jsonl(out_path, (
        {"id": tweet_id, "label": label.value, "source": label.source}
        for tweet_id, label in labels.items()
    ))
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["id", "label"])
            for tweet_id, label in labels.items():
                writer.writerow([tweet_id, label.value])
    positives = sum(1 for lb in labels.values() if lb.value == DISTRESS)
    click.echo(f"tweets: {len(labels)}  distress: {positives}  "
               f"no_distress: {len(labels) - positives}")


def _load_screening(path: str) -> ScreeningReport:
    with open(path, encoding="utf-8") as f:
        return ScreeningReport.from_obj(json.load(f))


@crowd.command("agreement")
@click.option("--responses", "responses_path", type=click.Path(exists=True), required=True)
@click.option("--campaign", "campaign_path", type=click.Path(exists=True), required=True)
@click.option("--screening", "screening_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@operational
def crowd_agreement(responses_path, campaign_path, screening_path, out_path):
    """Percent agreement with each tweet's majority label."""
    campaign = _load_campaign(campaign_path)
    screening = _load_screening(screening_path)
    responses = _screened_real_responses(responses_path, campaign, screening)
    result = agreement_stats(responses)
    _write_json(out_path, result.to_obj())
    click.echo(f"agreement: {result.mean * 100:.2f}% (± {result.std * 100:.2f}%)")


# -- eval ---------------------------------------------------------------

@main.group("eval")
def eval_group():
    """Prediction scoring and judge aggregation."""


@eval_group.command("score")
@click.option("--predictions", "predictions_path", type=click.Path(exists=True), required=True)
@click.option("--gold", "gold_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.option("--csv", "csv_path", type=click.Path(), default=None)
@operational
def eval_score(predictions_path, gold_path, out_path, csv_path):
    """Score raw model outputs against gold labels."""
    predictions = {row["id"]: row["output"] for row in jsonl.read_jsonl(predictions_path)}
    gold = {row["id"]: row["label"] for row in jsonl.read_jsonl(gold_path)}
    report = score_predictions(predictions, gold)
    for name, value in report.percent_rows()[1:]:
        click.echo(f"{name:<16} {value}")
    if out_path:
        _write_json(out_path, report.to_obj())
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f).writerows(report.percent_rows())


@eval_group.command("judge-aggregate")
@click.option("--scores", "scores_path", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Plot-ready CSV (group, criterion, mean, std, n).")
@click.option("--json", "json_path", type=click.Path(), default=None)
@operational
def eval_judge_aggregate(scores_path, out_path, json_path):
    """Aggregate judge rubric scores per group and criterion."""
    scores = []
    groups = {}
    for row in jsonl.read_jsonl(scores_path):
        scores.append(JudgeScore(str(row["sample_id"]), row["criterion"], int(row["score"])))
        if "group" in row:
            groups[str(row["sample_id"])] = str(row["group"])
    aggregates = aggregate_judge(scores, groups or None)
    write_judge_csv(out_path, aggregates)
    if json_path:
        obj = {
            group: {
                criterion: {"mean": a.mean, "std": a.std, "n": a.n}
                for criterion, a in per.items()
            }
            for group, per in aggregates.items()
        }
        _write_json(json_path, obj)
    for row in judge_csv_rows(aggregates)[1:]:
        click.echo("  ".join(str(x) for x in row))


# -- service -----------------------------------------------------------

@main.command()
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--assignments", "assignments_path", type=click.Path(exists=True), required=True)
@click.option("--log", "log_path", type=click.Path(), required=True)
@click.option("--idle-timeout", type=float, default=None)
@operational
def serve(port, host, assignments_path, log_path, idle_timeout):
    """Serve the annotation campaign over HTTP."""
    import uvicorn

    campaign = _load_campaign(assignments_path)
    store = SessionStore(campaign, log_path, idle_timeout=idle_timeout)
    uvicorn.run(create_app(store), host=host, port=port, log_level="warning")


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


if __name__ == "__main__":
    main()
