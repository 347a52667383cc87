"""Evaluation-campaign construction and annotator quality control.

Covers the whole human-labeling flow after tweets are selected: slicing the
sample into fixed-size batches, spreading annotators into panels, screening
out careless responders (attention checks first, then response-time
speeders), majority-vote label aggregation with the distress tie-break, and
percent-agreement statistics.
"""

from __future__ import annotations

import hashlib
import random
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .annotations import DISTRESS, NO_DISTRESS, BinaryDistressLabel

PASS_DISTRESS = "distress_binary"
PASS_LIKERT = "experiential_likert"
PASSES = (PASS_DISTRESS, PASS_LIKERT)

RIDER_FREQUENCIES = ("daily", "several_weekly", "several_monthly", "several_yearly", "rarer")
_REGULAR_FREQUENCIES = {"daily", "several_weekly", "several_monthly"}

ATTENTION_CHECKS_PER_ANNOTATOR = 4
MIN_CORRECT_ATTENTION = 3
SPEEDER_MEDIAN_FLOOR_S = 2.0


class CrowdError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatorProfile:
    annotator_id: str
    rider_frequency: str

    def __post_init__(self):
        if self.rider_frequency not in RIDER_FREQUENCIES:
            raise CrowdError(f"unknown rider frequency: {self.rider_frequency!r}")

    @property
    def cohort(self) -> str:
        return "regular" if self.rider_frequency in _REGULAR_FREQUENCIES else "occasional"


@dataclass
class BatchAssignment:
    batch_id: int
    tweet_ids: list[str]
    annotator_ids: list[str]

    def to_obj(self) -> dict:
        return {
            "batch_id": self.batch_id,
            "tweet_ids": self.tweet_ids,
            "annotator_ids": self.annotator_ids,
        }


def _keyed_hash(seed: int, value: str) -> int:
    h = hashlib.blake2b(value.encode("utf-8"), digest_size=8, key=str(seed).encode())
    return int.from_bytes(h.digest(), "big")


def assign_batches(
    tweet_ids: Sequence[str],
    annotator_ids: Sequence[str],
    batch_size: int = 50,
    min_panel: int = 9,
    max_panel: int = 11,
    seed: int = 0,
) -> list[BatchAssignment]:
    """Partition tweets into batches and deal annotators into panels.

    Tweets are shuffled under the seed and chunked; annotators are ordered
    by a keyed hash and dealt round-robin, so panel sizes differ by at
    most one and the assignment is reproducible.
    """
    if len(set(tweet_ids)) != len(tweet_ids):
        raise CrowdError("duplicate tweet ids")
    if len(set(annotator_ids)) != len(annotator_ids):
        raise CrowdError("duplicate annotator ids")
    if batch_size < 1 or len(tweet_ids) % batch_size != 0:
        raise CrowdError(
            f"{len(tweet_ids)} tweets do not divide into batches of {batch_size}"
        )
    num_batches = len(tweet_ids) // batch_size
    if num_batches == 0:
        raise CrowdError("no tweets to assign")
    shortfall = num_batches * min_panel - len(annotator_ids)
    if shortfall > 0:
        raise CrowdError(
            f"need at least {num_batches * min_panel} annotators for "
            f"{num_batches} panels of {min_panel}; short by {shortfall}"
        )
    if len(annotator_ids) > num_batches * max_panel:
        raise CrowdError(
            f"{len(annotator_ids)} annotators exceed {num_batches} panels of {max_panel}"
        )

    shuffled_tweets = list(tweet_ids)
    random.Random(seed).shuffle(shuffled_tweets)
    ordered_annotators = sorted(annotator_ids, key=lambda a: (_keyed_hash(seed, a), a))

    batches = [
        BatchAssignment(
            batch_id=i,
            tweet_ids=shuffled_tweets[i * batch_size:(i + 1) * batch_size],
            annotator_ids=[],
        )
        for i in range(num_batches)
    ]
    for pos, annotator in enumerate(ordered_annotators):
        batches[pos % num_batches].annotator_ids.append(annotator)
    return batches


@dataclass(frozen=True)
class ItemResponse:
    annotator_id: str
    tweet_id: str
    pass_name: str
    value: object  # bool for the distress pass, int for the Likert pass
    response_time: float
    presented_position: int = 0

    def __post_init__(self):
        if self.pass_name not in PASSES:
            raise CrowdError(f"unknown pass: {self.pass_name!r}")
        if self.response_time <= 0:
            raise CrowdError("response_time must be > 0")

    @classmethod
    def from_obj(cls, obj: dict) -> "ItemResponse":
        return cls(
            annotator_id=str(obj["annotator_id"]),
            tweet_id=str(obj["tweet_id"]),
            pass_name=str(obj["pass"]),
            value=obj["value"],
            response_time=float(obj["response_time"]),
            presented_position=int(obj.get("presented_position", 0)),
        )

    def to_obj(self) -> dict:
        return {
            "annotator_id": self.annotator_id,
            "tweet_id": self.tweet_id,
            "pass": self.pass_name,
            "value": self.value,
            "response_time": self.response_time,
            "presented_position": self.presented_position,
        }


def collect_responses(responses: Iterable[ItemResponse]) -> list[ItemResponse]:
    """Validate a response log: duplicates are rejected, never averaged."""
    seen: set[tuple[str, str, str]] = set()
    out = []
    for response in responses:
        key = (response.annotator_id, response.tweet_id, response.pass_name)
        if key in seen:
            raise CrowdError(
                f"duplicate response: annotator {response.annotator_id}, "
                f"tweet {response.tweet_id}, pass {response.pass_name}"
            )
        seen.add(key)
        out.append(response)
    return out


@dataclass(frozen=True)
class AttentionKey:
    item_id: str
    expected: object


@dataclass
class ScreeningReport:
    initial: int
    failed_attention: list[str]
    speeders: list[str]
    incomplete: list[str]
    final: int
    kept_ids: list[str] = field(default_factory=list)

    def to_obj(self) -> dict:
        return {
            "initial": self.initial,
            "failed_attention": self.failed_attention,
            "speeders": self.speeders,
            "incomplete": self.incomplete,
            "final": self.final,
            "kept_ids": self.kept_ids,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "ScreeningReport":
        return cls(
            initial=int(obj["initial"]),
            failed_attention=list(obj["failed_attention"]),
            speeders=list(obj["speeders"]),
            incomplete=list(obj.get("incomplete", [])),
            final=int(obj["final"]),
            kept_ids=list(obj.get("kept_ids", [])),
        )


def screen_annotators(
    responses: Iterable[ItemResponse],
    attention_keys: dict[str, Sequence[AttentionKey]],
    *,
    min_correct: int = MIN_CORRECT_ATTENTION,
    speed_floor: float = SPEEDER_MEDIAN_FLOOR_S,
) -> ScreeningReport:
    """Two-step careless-responder screen.

    Step one drops annotators with fewer than `min_correct` of their four
    attention checks answered as instructed; step two drops survivors
    whose median response time over their real (non-attention) items falls
    below the floor. Annotators missing attention data are excluded
    separately as incomplete and never reach either step.
    """
    responses = collect_responses(responses)
    by_annotator: dict[str, list[ItemResponse]] = {}
    for r in responses:
        by_annotator.setdefault(r.annotator_id, []).append(r)

    incomplete: list[str] = []
    eligible: list[str] = []
    for annotator_id in sorted(by_annotator):
        keys = attention_keys.get(annotator_id, ())
        if len(keys) != ATTENTION_CHECKS_PER_ANNOTATOR:
            incomplete.append(annotator_id)
            continue
        answered = {
            (r.tweet_id, r.pass_name): r.value for r in by_annotator[annotator_id]
        }
        if any((k.item_id, PASS_DISTRESS) not in answered for k in keys):
            incomplete.append(annotator_id)
            continue
        eligible.append(annotator_id)

    failed_attention: list[str] = []
    survivors: list[str] = []
    for annotator_id in eligible:
        keys = attention_keys[annotator_id]
        answered = {
            (r.tweet_id, r.pass_name): r.value for r in by_annotator[annotator_id]
        }
        correct = sum(
            1 for k in keys if answered[(k.item_id, PASS_DISTRESS)] == k.expected
        )
        if correct < min_correct:
            failed_attention.append(annotator_id)
        else:
            survivors.append(annotator_id)

    speeders: list[str] = []
    kept: list[str] = []
    for annotator_id in survivors:
        attention_items = {k.item_id for k in attention_keys[annotator_id]}
        times = [
            r.response_time
            for r in by_annotator[annotator_id]
            if r.tweet_id not in attention_items
        ]
        if times and statistics.median(times) < speed_floor:
            speeders.append(annotator_id)
        else:
            kept.append(annotator_id)

    return ScreeningReport(
        initial=len(eligible),
        failed_attention=failed_attention,
        speeders=speeders,
        incomplete=incomplete,
        final=len(eligible) - len(failed_attention) - len(speeders),
        kept_ids=kept,
    )


def aggregate_labels(
    responses: Iterable[ItemResponse],
    expected_tweets: Iterable[str] | None = None,
) -> dict[str, BinaryDistressLabel]:
    """Majority vote per tweet; exact ties resolve to the distress label."""
    distress_votes: dict[str, int] = {}
    totals: dict[str, int] = {}
    for r in collect_responses(responses):
        if r.pass_name != PASS_DISTRESS:
            continue
        totals[r.tweet_id] = totals.get(r.tweet_id, 0) + 1
        if r.value is True:
            distress_votes[r.tweet_id] = distress_votes.get(r.tweet_id, 0) + 1
    if expected_tweets is not None:
        missing = sorted(set(expected_tweets) - set(totals))
        if missing:
            raise CrowdError(f"tweets with zero screened responses: {missing}")
    labels = {}
    for tweet_id in sorted(totals):
        yes = distress_votes.get(tweet_id, 0)
        no = totals[tweet_id] - yes
        value = DISTRESS if yes >= no else NO_DISTRESS
        labels[tweet_id] = BinaryDistressLabel(value, "human_vote")
    return labels


@dataclass
class AgreementStats:
    per_tweet: dict[str, float]
    mean: float
    std: float

    def to_obj(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "per_tweet": dict(sorted(self.per_tweet.items())),
        }


def agreement_stats(responses: Iterable[ItemResponse]) -> AgreementStats:
    """Percent agreement with the per-tweet majority label.

    A tweet's agreement is the share of its responses matching its
    majority label; an exact tie scores 0.5 (the tie-break side). The
    overall figure is the mean with the population standard deviation
    across tweets.
    """
    votes: dict[str, list[bool]] = {}
    for r in collect_responses(responses):
        if r.pass_name != PASS_DISTRESS:
            continue
        votes.setdefault(r.tweet_id, []).append(bool(r.value))
    per_tweet = {}
    for tweet_id, values in votes.items():
        if len(values) < 2:
            raise CrowdError(f"tweet {tweet_id} has fewer than 2 responses")
        yes = sum(values)
        no = len(values) - yes
        majority_votes = yes if yes >= no else no
        per_tweet[tweet_id] = majority_votes / len(values)
    if not per_tweet:
        return AgreementStats(per_tweet={}, mean=0.0, std=0.0)
    values = list(per_tweet.values())
    return AgreementStats(
        per_tweet=per_tweet,
        mean=statistics.fmean(values),
        std=statistics.pstdev(values),
    )


def likert_medians(responses: Iterable[ItemResponse]) -> dict[str, float]:
    """Median experiential-cue grade per tweet (reported, not a gold label)."""
    grades: dict[str, list[int]] = {}
    for r in collect_responses(responses):
        if r.pass_name != PASS_LIKERT:
            continue
        grades.setdefault(r.tweet_id, []).append(int(r.value))
    return {t: float(statistics.median(v)) for t, v in sorted(grades.items())}
