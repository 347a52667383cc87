from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from distresskit.evaluation import (
    ConfusionCounts,
    JudgeScore,
    MetricsError,
    aggregate_judge,
    judge_csv_rows,
    metrics_from_counts,
    parse_judge_scores,
    score_predictions,
)

from oracles import counts_for_precision_recall, naive_metrics, two_pass_mean_std


def _distress_output(judgment: str) -> str:
    return f"### Distress ###\nSpans considered. Final answer: **{judgment}**"


class TestMetricsFromCounts:
    def test_fr_reasoner_row_f1(self):
        tp, fp, fn, tn = counts_for_precision_recall(Fraction(822, 1000), Fraction(737, 1000))
        report = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
        assert report.precision * 100 == pytest.approx(82.2, abs=1e-9)
        assert report.recall * 100 == pytest.approx(73.7, abs=1e-9)
        assert report.f1 * 100 == pytest.approx(77.7, abs=0.05)

    def test_single_true_positive_all_ones(self):
        report = metrics_from_counts(ConfusionCounts(tp=1))
        assert (report.accuracy, report.precision, report.recall, report.f1) == (1, 1, 1, 1)

    def test_degenerate_denominators(self):
        report = metrics_from_counts(ConfusionCounts(tp=0, fp=0, fn=5, tn=5))
        assert report.precision == 0.0
        assert report.recall == 0.0
        assert report.f1 == 0.0
        assert report.accuracy == 0.5

    def test_zero_total_is_error(self):
        with pytest.raises(MetricsError):
            metrics_from_counts(ConfusionCounts())

    def test_negative_counts_rejected(self):
        with pytest.raises(MetricsError):
            ConfusionCounts(tp=-1)

    def test_matches_naive_rederivation(self):
        rng = random.Random(17)
        for _ in range(2000):
            tp, fp, fn, tn = (rng.randint(0, 500) for _ in range(4))
            if tp + fp + fn + tn == 0:
                continue
            report = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
            expected = naive_metrics(tp, fp, fn, tn)
            for name in ("accuracy", "precision", "recall", "f1"):
                assert getattr(report, name) == pytest.approx(expected[name], abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 10**6), st.integers(0, 10**6),
           st.integers(0, 10**6), st.integers(0, 10**6))
    def test_harmonic_mean_ordering(self, tp, fp, fn, tn):
        report = metrics_from_counts(ConfusionCounts(tp, fp, fn, tn))
        assert 0 <= report.f1 <= 1
        if report.precision > 0 and report.recall > 0:
            # up to one ulp of slack: when P == R the float harmonic mean
            # can land a rounding step away from them
            assert min(report.precision, report.recall) - 1e-12 <= report.f1
            assert report.f1 <= max(report.precision, report.recall) + 1e-12


class TestScorePredictions:
    def test_hand_counted_twenty_item_fixture(self):
        gold = {}
        predictions = {}
        i = 0

        def add(n, gold_label, judgment):
            nonlocal i
            for _ in range(n):
                item = f"i{i:02d}"
                gold[item] = gold_label
                if judgment is not None:
                    predictions[item] = _distress_output(judgment)
                i += 1

        add(6, "distress", "present")      # tp
        add(2, "no_distress", "present")   # fp
        add(3, "distress", "absent")       # fn
        add(9, "no_distress", "absent")    # tn
        report = score_predictions(predictions, gold)
        assert report.counts.tp == 6 and report.counts.fp == 2
        assert report.counts.fn == 3 and report.counts.tn == 9
        assert report.accuracy == pytest.approx(0.75)
        assert report.precision == pytest.approx(0.75)
        assert report.recall == pytest.approx(2 / 3)

    def test_all_correct_gives_ones(self):
        gold = {"a": "distress", "b": "no_distress"}
        predictions = {"a": _distress_output("present"), "b": _distress_output("absent")}
        report = score_predictions(predictions, gold)
        assert report.accuracy == report.precision == report.recall == report.f1 == 1.0
        assert report.parse_failures == 0

    def test_missing_and_unparseable_predictions_score_negative(self):
        gold = {"a": "distress", "b": "distress", "c": "no_distress"}
        predictions = {"a": "no judgment here at all"}  # b, c missing entirely
        report = score_predictions(predictions, gold)
        assert report.parse_failures == 3
        assert report.counts.fn == 2
        assert report.counts.tn == 1

    def test_external_scores_as_negative(self):
        gold = {"a": "no_distress"}
        report = score_predictions({"a": _distress_output("external")}, gold)
        assert report.counts.tn == 1
        assert report.parse_failures == 0

    def test_unknown_prediction_id_is_error(self):
        with pytest.raises(MetricsError, match="ghost"):
            score_predictions({"ghost": "x"}, {"a": "distress"})

    def test_parse_failure_monotonicity(self):
        rng = random.Random(23)
        gold = {f"i{k}": rng.choice(["distress", "no_distress"]) for k in range(60)}
        predictions = {
            k: _distress_output(rng.choice(["present", "absent", "external"]))
            for k in gold
        }
        base = score_predictions(predictions, gold)
        for _ in range(25):
            corrupted = dict(predictions)
            for key in rng.sample(sorted(corrupted), rng.randint(1, 20)):
                corrupted[key] = "garbled! no tokens."
            degraded = score_predictions(corrupted, gold)
            assert degraded.recall <= base.recall + 1e-12


class TestJudgeScores:
    def test_parse_tagged_block(self):
        text = "<language>3</language>\n<content>2</content>\n<other_attributes>1</other_attributes>"
        scores = parse_judge_scores(text, "s1")
        assert [(s.criterion, s.score) for s in scores] == [
            ("language", 3), ("content", 2), ("other_attributes", 1),
        ]

    def test_out_of_range_rejected_with_sample_id(self):
        text = "<language>5</language><content>2</content><other_attributes>1</other_attributes>"
        with pytest.raises(MetricsError, match="s9"):
            parse_judge_scores(text, "s9")

    def test_missing_criterion_rejected(self):
        with pytest.raises(MetricsError, match="other_attributes"):
            parse_judge_scores("<language>1</language><content>0</content>", "s1")

    def test_all_threes(self):
        scores = [JudgeScore(f"s{i}", "language", 3) for i in range(10)]
        agg = aggregate_judge(scores)["all"]["language"]
        assert agg.mean == 3.0 and agg.std == 0.0 and agg.n == 10

    def test_two_point_symmetric(self):
        scores = [JudgeScore("a", "content", 0), JudgeScore("b", "content", 3)]
        agg = aggregate_judge(scores)["all"]["content"]
        assert agg.mean == 1.5 and agg.std == 1.5

    def test_simulated_scores_match_two_pass_recomputation(self):
        rng = random.Random(41)
        scores = []
        values = {"language": [], "content": [], "other_attributes": []}
        for i in range(200):
            for criterion in values:
                v = rng.randint(0, 3)
                values[criterion].append(v)
                scores.append(JudgeScore(f"s{i}", criterion, v))
        agg = aggregate_judge(scores)["all"]
        for criterion, vals in values.items():
            mean, std = two_pass_mean_std([float(v) for v in vals])
            assert agg[criterion].mean == pytest.approx(mean, abs=1e-12)
            assert agg[criterion].std == pytest.approx(std, abs=1e-12)

    def test_groups_stay_disjoint_and_order_invariant(self):
        scores = [
            JudgeScore("a1", "language", 3), JudgeScore("a2", "language", 1),
            JudgeScore("b1", "language", 0),
        ]
        groups = {"a1": "with_reasoning", "a2": "with_reasoning", "b1": "plain"}
        agg = aggregate_judge(scores, groups)
        assert agg["with_reasoning"]["language"].mean == 2.0
        assert agg["plain"]["language"].mean == 0.0
        shuffled = aggregate_judge(list(reversed(scores)), groups)
        assert shuffled["with_reasoning"]["language"] == agg["with_reasoning"]["language"]

    def test_csv_rows_shape(self):
        scores = [JudgeScore("a", "language", 2), JudgeScore("a", "content", 3),
                  JudgeScore("a", "other_attributes", 1)]
        rows = judge_csv_rows(aggregate_judge(scores))
        assert rows[0] == ["group", "criterion", "mean", "std", "n"]
        assert len(rows) == 4
