"""Prediction scoring and judge-score aggregation.

Binary distress predictions are scored with distress as the positive class.
Raw model outputs go through the reasoning parser first; anything that
fails to parse (including a missing prediction) scores as a negative
prediction rather than being excluded.
"""

from __future__ import annotations

import csv
import re
import statistics
from dataclasses import dataclass
from typing import Iterable

from .annotations import DISTRESS, BinaryDistressLabel, parse_distress_output

JUDGE_CRITERIA = ("language", "content", "other_attributes")
JUDGE_SCORE_RANGE = (0, 3)


class MetricsError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    parse_failures: int
    counts: ConfusionCounts

    def to_obj(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "parse_failures": self.parse_failures,
            "counts": {
                "tp": self.counts.tp, "fp": self.counts.fp,
                "fn": self.counts.fn, "tn": self.counts.tn,
            },
        }

    def percent_rows(self) -> list[list[str]]:
        """Table rows with percentages at one decimal place."""
        return [
            ["metric", "value"],
            ["accuracy", f"{self.accuracy * 100:.1f}"],
            ["precision", f"{self.precision * 100:.1f}"],
            ["recall", f"{self.recall * 100:.1f}"],
            ["f1", f"{self.f1 * 100:.1f}"],
            ["parse_failures", str(self.parse_failures)],
        ]


def metrics_from_counts(counts: ConfusionCounts, parse_failures: int = 0) -> MetricsReport:
    """Accuracy, precision, recall, F1 from a confusion matrix.

    Degenerate denominators score 0 rather than raising; an entirely empty
    matrix is an error.
    """
    total = counts.total
    if total == 0:
        raise MetricsError("cannot compute metrics over zero items")
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(
        accuracy=(counts.tp + counts.tn) / total,
        precision=precision,
        recall=recall,
        f1=f1,
        parse_failures=parse_failures,
        counts=counts,
    )


def _as_label(value) -> BinaryDistressLabel:
    if isinstance(value, BinaryDistressLabel):
        return value
    return BinaryDistressLabel(str(value), "human_vote")


def score_predictions(
    predictions: dict[str, str],
    gold: dict[str, BinaryDistressLabel | str],
) -> MetricsReport:
    """Score raw model outputs against gold labels.

    Every gold id is scored. A missing or unparseable prediction counts as
    a negative prediction (and as a parse failure); predictions for
    unknown ids are an error.
    """
    unknown = sorted(set(predictions) - set(gold))
    if unknown:
        raise MetricsError(f"predictions for ids not in gold: {unknown}")
    counts = ConfusionCounts()
    parse_failures = 0
    for item_id in sorted(gold):
        gold_positive = _as_label(gold[item_id]).value == DISTRESS
        raw = predictions.get(item_id)
        if raw is None:
            label = BinaryDistressLabel("no_distress", "parse_failure_default")
        else:
            _, label = parse_distress_output(raw)
        if label.source == "parse_failure_default":
            parse_failures += 1
        predicted_positive = label.value == DISTRESS
        if predicted_positive and gold_positive:
            counts.tp += 1
        elif predicted_positive:
            counts.fp += 1
        elif gold_positive:
            counts.fn += 1
        else:
            counts.tn += 1
    return metrics_from_counts(counts, parse_failures)


@dataclass(frozen=True)
class JudgeScore:
    sample_id: str
    criterion: str
    score: int

    def __post_init__(self):
        if self.criterion not in JUDGE_CRITERIA:
            raise MetricsError(f"unknown criterion: {self.criterion!r}")
        lo, hi = JUDGE_SCORE_RANGE
        if not lo <= self.score <= hi:
            raise MetricsError(
                f"sample {self.sample_id}: score {self.score} outside [{lo}, {hi}]"
            )


def parse_judge_scores(text: str, sample_id: str) -> list[JudgeScore]:
    """Parse one integer per criterion from a tagged judge output block.

    Expected shape: `<language>3</language><content>2</content>
    <other_attributes>1</other_attributes>` (whitespace free-form).
    """
    scores = []
    for criterion in JUDGE_CRITERIA:
        m = re.search(rf"<{criterion}>\s*(-?\d+)\s*</{criterion}>", text)
        if not m:
            raise MetricsError(f"sample {sample_id}: missing <{criterion}> score")
        scores.append(JudgeScore(sample_id, criterion, int(m.group(1))))
    return scores


@dataclass
class CriterionAggregate:
    mean: float
    std: float
    n: int


def aggregate_judge(
    scores: Iterable[JudgeScore],
    groups: dict[str, str] | None = None,
) -> dict[str, dict[str, CriterionAggregate]]:
    """Mean and population std per criterion per group.

    `groups` maps sample_id to a group name (e.g. the generating model);
    without it all samples land in one group.
    """
    buckets: dict[tuple[str, str], list[int]] = {}
    for score in scores:
        group = (groups or {}).get(score.sample_id, "all")
        buckets.setdefault((group, score.criterion), []).append(score.score)
    result: dict[str, dict[str, CriterionAggregate]] = {}
    for (group, criterion), values in sorted(buckets.items()):
        result.setdefault(group, {})[criterion] = CriterionAggregate(
            mean=statistics.fmean(values),
            std=statistics.pstdev(values),
            n=len(values),
        )
    return result


def judge_csv_rows(aggregates: dict[str, dict[str, CriterionAggregate]]) -> list[list]:
    """Plot-ready table: one row per (group, criterion)."""
    rows: list[list] = [["group", "criterion", "mean", "std", "n"]]
    for group in sorted(aggregates):
        for criterion in JUDGE_CRITERIA:
            agg = aggregates[group].get(criterion)
            if agg is None:
                continue
            rows.append([group, criterion, f"{agg.mean:.6f}", f"{agg.std:.6f}", agg.n])
    return rows


def write_judge_csv(path: str, aggregates: dict[str, dict[str, CriterionAggregate]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        csv.writer(f).writerows(judge_csv_rows(aggregates))
