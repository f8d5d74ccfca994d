import tempfile
import unittest
from collections import defaultdict
from itertools import permutations
from pathlib import Path

import numpy as np
import torch

from fsrel.errors import ProtocolError
from fsrel.evaluation import (
    GroundTruthTriplet,
    SupportScorer,
    TripletPrediction,
    evaluate,
    ground_truth,
    mean_recall,
    rank_predictions,
    score_image,
)
from fsrel.model import build_model
from fsrel.sgdata import SplitSpec, SupportEntry, SupportIndex, TripletRef, sample_support_sets
from fsrel.tests.builders import tiny_model_config, toy_dataset
from fsrel.utils import read_json_lines

ORDER = {"p0": 0, "p1": 1, "p2": 2, "p3": 3}


def _pred(image, s, o, predicate, score, labels=("a", "b")):
    return TripletPrediction(image, s, labels[0], o, labels[1], predicate, score)


def _gt(image, s, o, predicate, labels=("a", "b")):
    return GroundTruthTriplet(image, s, labels[0], o, labels[1], predicate)


def _brute_force_recall(predictions, gt, k, split, order):
    """Straightforward per-image loop used as a reference."""
    images = defaultdict(list)
    for p in predictions:
        images[p.image_id].append(p)
    kept = {}
    for image_id, preds in images.items():
        best = {}
        for p in sorted(preds, key=lambda p: (-p.score, order[p.predicate])):
            best.setdefault(p.pair, p)
        ordered = sorted(best.values(), key=lambda p: (-p.score, order[p.predicate], p.pair))
        kept[image_id] = [(p.subject_id, p.subject_label, p.object_id, p.object_label, p.predicate) for p in ordered[:k]]
    recalls = {}
    for predicate in split:
        relevant = [t for t in gt if t.predicate == predicate]
        if not relevant:
            continue
        found = sum(
            (t.subject_id, t.subject_label, t.object_id, t.object_label, t.predicate) in kept.get(t.image_id, [])
            for t in relevant
        )
        recalls[predicate] = found / len(relevant)
    return sum(recalls.values()) / len(recalls) if recalls else None


def _random_corpus(rng):
    predictions, gt = [], []
    for i in range(int(rng.integers(1, 4))):
        image = f"img{i}"
        labels = {j: str(rng.choice(["a", "b", "c"])) for j in range(int(rng.integers(2, 5)))}
        for s, o in permutations(labels, 2):
            for predicate in ORDER:
                # coarse scores force ties
                score = round(float(rng.random()), 1)
                predictions.append(TripletPrediction(image, s, labels[s], o, labels[o], predicate, score))
                if rng.random() < 0.15:
                    gt.append(GroundTruthTriplet(image, s, labels[s], o, labels[o], predicate))
    return predictions, gt


class TestMeanRecall(unittest.TestCase):
    """Graph-constrained mean recall"""

    def test_perfect_predictions(self):
        gt = [_gt("i", 0, 1, "p0"), _gt("i", 1, 0, "p1"), _gt("j", 0, 1, "p0")]
        predictions = []
        for image, s, o, target in (("i", 0, 1, "p0"), ("i", 1, 0, "p1"), ("j", 0, 1, "p0")):
            for predicate in ORDER:
                predictions.append(_pred(image, s, o, predicate, 0.9 if predicate == target else 0.01))
        block, per_predicate = mean_recall(predictions, gt, [1, 2], ["p0", "p1"], ORDER)
        self.assertEqual(block, {"mR@1": 0.5, "mR@2": 1.0})
        self.assertEqual(per_predicate["p0"], {"R@1": 1.0, "R@2": 1.0})
        self.assertEqual(per_predicate["p1"], {"R@1": 0.0, "R@2": 1.0})

    def test_wrong_predicate(self):
        gt = [_gt("i", 0, 1, "p0")]
        predictions = [_pred("i", 0, 1, "p0", 0.2), _pred("i", 0, 1, "p1", 0.7)]
        block, _ = mean_recall(predictions, gt, [1, 5], ["p0", "p1"], ORDER)
        self.assertEqual(block, {"mR@1": 0.0, "mR@5": 0.0})

    def test_wrong_labels_miss(self):
        """A prediction only matches when both object labels agree"""
        gt = [_gt("i", 0, 1, "p0", ("a", "b"))]
        predictions = [_pred("i", 0, 1, "p0", 0.9, ("a", "c"))]
        block, _ = mean_recall(predictions, gt, [5], ["p0"], ORDER)
        self.assertEqual(block["mR@5"], 0.0)

    def test_graph_constraint(self):
        """Each pair keeps only its best predicate, so two predicates on one pair cannot both hit"""
        gt = [_gt("i", 0, 1, "p0"), _gt("i", 0, 1, "p1")]
        predictions = [_pred("i", 0, 1, "p0", 0.5), _pred("i", 0, 1, "p1", 0.4)]
        ranked = rank_predictions(predictions, ORDER)
        self.assertEqual([p.predicate for p in ranked["i"]], ["p0"])
        block, per_predicate = mean_recall(predictions, gt, [10], ["p0", "p1"], ORDER)
        self.assertEqual(per_predicate, {"p0": {"R@10": 1.0}, "p1": {"R@10": 0.0}})
        self.assertEqual(block["mR@10"], 0.5)
        unconstrained = rank_predictions(predictions, ORDER, graph_constraint=False)
        self.assertEqual(len(unconstrained["i"]), 2)

    def test_ties_break_by_predicate_then_pair(self):
        predictions = [_pred("i", 1, 0, "p1", 0.5), _pred("i", 0, 1, "p1", 0.5), _pred("i", 2, 0, "p0", 0.5)]
        ranked = rank_predictions(predictions, ORDER)["i"]
        self.assertEqual([(p.pair, p.predicate) for p in ranked], [((2, 0), "p0"), ((0, 1), "p1"), ((1, 0), "p1")])

    def test_split_without_ground_truth(self):
        """A split with no ground truth reports None rather than zero"""
        block, per_predicate = mean_recall([_pred("i", 0, 1, "p0", 0.5)], [_gt("i", 0, 1, "p0")], [1, 5], ["p3"], ORDER)
        self.assertEqual(block, {"mR@1": None, "mR@5": None})
        self.assertEqual(per_predicate, {})

    def test_matches_brute_force(self):
        """Random corpora agree with a direct per-image computation"""
        rng = np.random.default_rng(11)
        for trial in range(30):
            predictions, gt = _random_corpus(rng)
            for k in (1, 3, 10):
                with self.subTest(trial=trial, k=k):
                    block, _ = mean_recall(predictions, gt, [k], ["p0", "p2", "p3"], ORDER)
                    expected = _brute_force_recall(predictions, gt, k, ["p0", "p2", "p3"], ORDER)
                    if expected is None:
                        self.assertIsNone(block[f"mR@{k}"])
                    else:
                        self.assertAlmostEqual(block[f"mR@{k}"], expected, places=12)

    def test_monotone_in_cutoff(self):
        rng = np.random.default_rng(12)
        for trial in range(20):
            predictions, gt = _random_corpus(rng)
            block, _ = mean_recall(predictions, gt, [1, 2, 5, 20, 100], list(ORDER), ORDER)
            values = [block[f"mR@{k}"] for k in (1, 2, 5, 20, 100)]
            if values[0] is None:
                continue
            with self.subTest(trial=trial):
                self.assertEqual(values, sorted(values))


class TestGroundTruth(unittest.TestCase):
    def test_support_triplets_are_excluded(self):
        dataset = toy_dataset()
        flagged = {TripletRef("i0", 0), TripletRef("i2", 1)}
        gt = ground_truth(dataset, ["i0", "i2"], flagged)
        self.assertEqual(len(gt), 3)
        self.assertNotIn(("i0", "p0"), {(t.image_id, t.predicate) for t in gt})
        self.assertEqual({t.predicate for t in ground_truth(dataset, ["i0", "i1", "i2"], set(), ["p1"])}, {"p1"})


class EvaluationCase(unittest.TestCase):
    def setUp(self):
        self.dataset = toy_dataset()
        self.split = SplitSpec(
            base_predicates=frozenset({"p0", "p1"}),
            novel_predicates=frozenset({"p2", "p3"}),
            object_categories=frozenset({"a", "b", "c"}),
        )
        self.model = build_model(tiny_model_config(), self.dataset, seed=0)
        self.index = sample_support_sets(self.dataset, self.split, K=1, seed=0)


class TestScoring(EvaluationCase):
    """Scoring every ordered pair of an image"""

    def test_pair_and_candidate_count(self):
        scorer = SupportScorer(self.model, self.dataset, self.index, ["p0", "p1", "p2", "p3"])
        for image in self.dataset.images:
            n = len(image.objects)
            with self.subTest(image=image.id):
                predictions = score_image(image, scorer)
                self.assertEqual(len(predictions), n * (n - 1) * 4)
                self.assertEqual({p.predicate for p in predictions}, set(ORDER))

    def test_uniform_scores_with_zero_embeddings(self):
        """Zero embeddings and a zero background give every predicate 1/(R+1)"""
        for param in self.model.aggregator.parameters():
            torch.nn.init.zeros_(param)
        with torch.no_grad():
            self.model.background.zero_()
        scorer = SupportScorer(self.model, self.dataset, self.index, ["p0", "p1", "p2"])
        for p in score_image(self.dataset.image("i2"), scorer):
            self.assertAlmostEqual(p.score, 0.25, places=12)

    def test_scores_leave_room_for_background(self):
        scorer = SupportScorer(self.model, self.dataset, self.index, ["p0", "p1"])
        totals = defaultdict(float)
        for p in score_image(self.dataset.image("i0"), scorer):
            totals[p.pair] += p.score
        self.assertTrue(all(0.0 < total < 1.0 for total in totals.values()))

    def test_sgcls_uses_predicted_labels(self):
        """With a classifier that always says 'c' every predicted triplet carries 'c' labels"""
        with torch.no_grad():
            self.model.object_head.weight.zero_()
            self.model.object_head.bias.copy_(torch.tensor([0.0, 0.0, 5.0], dtype=torch.float64))
        scorer = SupportScorer(self.model, self.dataset, self.index, ["p0"])
        predictions = score_image(self.dataset.image("i0"), scorer, task="SGCls")
        self.assertEqual({(p.subject_label, p.object_label) for p in predictions}, {("c", "c")})
        predcls = score_image(self.dataset.image("i0"), scorer, task="PredCls")
        self.assertIn(("a", "b"), {(p.subject_label, p.object_label) for p in predcls})

    def test_missing_support_bank(self):
        index = SupportIndex(shots=1, entries={"p0": (SupportEntry(image="i0", triplet=0),)})
        with self.assertRaises(ProtocolError):
            SupportScorer(self.model, self.dataset, index, ["p0", "p1"])


class TestEvaluate(EvaluationCase):
    """End-to-end K-shot evaluation"""

    def test_report_shape(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "predictions.jsonl"
            report = evaluate(self.dataset, self.split, self.index, self.model, recall_at=[1, 5], predictions_path=path)
            self.assertEqual(len(read_json_lines(path)), 14 * 4)
        self.assertEqual(report.K, 1)
        self.assertEqual(set(report.base), {"mR@1", "mR@5"})
        self.assertEqual(report.skipped_predicates, [])
        self.assertTrue(report.graph_constraint)
        for block in (report.base, report.novel):
            for value in block.values():
                self.assertTrue(value is None or 0.0 <= value <= 1.0)

    def test_deterministic_across_workers(self):
        """Repeated evaluation gives the same report whatever the worker count"""
        first = evaluate(self.dataset, self.split, self.index, self.model, recall_at=[1, 2, 5], workers=1)
        second = evaluate(self.dataset, self.split, self.index, self.model, recall_at=[1, 2, 5], workers=3)
        self.assertEqual(first.model_dump(), second.model_dump())

    def test_skipped_predicates(self):
        entries = {k: v for k, v in self.index.entries.items() if k != "p3"}
        index = SupportIndex(shots=1, entries=entries, skipped={"p3": "no images"})
        report = evaluate(self.dataset, self.split, index, self.model, recall_at=[5])
        self.assertEqual(report.skipped_predicates, ["p3"])
        self.assertNotIn("p3", report.per_predicate)

    def test_excluded_triplets_leave_the_ground_truth(self):
        """Triplets passed in ``exclude`` are dropped from ground truth like supports are"""
        every_p0 = [TripletRef("i0", 0), TripletRef("i1", 0), TripletRef("i2", 0)]
        report = evaluate(self.dataset, self.split, self.index, self.model, recall_at=[5])
        self.assertIn("p0", report.per_predicate)
        excluded = evaluate(self.dataset, self.split, self.index, self.model, recall_at=[5], exclude=every_p0)
        self.assertNotIn("p0", excluded.per_predicate)
        self.assertEqual(excluded.novel, report.novel)

    def test_no_supports_at_all(self):
        with self.assertRaises(ProtocolError):
            evaluate(self.dataset, self.split, SupportIndex(shots=1, entries={}), self.model)


if __name__ == "__main__":
    unittest.main()
