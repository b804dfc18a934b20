"""Tests for the closed-set metrics and report assembly."""

import itertools
import json

import numpy as np
import pytest

from o3dsg.evaluation import (
    EmptyGroundTruthError,
    GroundTruthGraph,
    attribute_top1,
    collect_items,
    evaluate,
    make_frequency_split,
    mean_recall_at_k,
    per_class_recall_at_k,
    recall_at_k,
    report_to_csv,
    split_report,
    triplet_rank,
    triplet_recall_at_k,
)
from o3dsg.infer import EdgePrediction, NodePrediction, PredictedSceneGraph


def ranked(*labels):
    """Descending ranking with evenly spaced scores."""
    n = len(labels)
    return [(label, float(n - k)) for k, label in enumerate(labels)]


class TestRecallAtK:
    ITEMS = [
        (ranked("a", "b", "c"), {"a"}),  # hit at k=1
        (ranked("a", "b", "c"), {"b"}),  # hit at k=2
        (ranked("a", "b", "c"), {"z"}),  # never hits
    ]

    def test_hand_oracle(self):
        assert recall_at_k(self.ITEMS, 1) == pytest.approx(1 / 3)
        assert recall_at_k(self.ITEMS, 2) == pytest.approx(2 / 3)
        assert recall_at_k(self.ITEMS, 3) == pytest.approx(2 / 3)

    def test_any_true_label_counts(self):
        items = [(ranked("z", "a"), {"a", "z"})]
        assert recall_at_k(items, 1) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(3)
        labels = [f"c{n}" for n in range(6)]
        items = []
        for _ in range(40):
            order = list(rng.permutation(labels))
            truth = set(rng.choice(labels, size=2, replace=False))
            items.append((ranked(*order), truth))
        values = [recall_at_k(items, k) for k in range(1, 7)]
        assert values == sorted(values)
        assert values[-1] == 1.0  # everything is retrieved at k = n_labels

    def test_validation(self):
        with pytest.raises(ValueError, match="k must be"):
            recall_at_k(self.ITEMS, 0)
        with pytest.raises(EmptyGroundTruthError):
            recall_at_k([], 1)


class TestPerClassRecall:
    def test_hand_oracle(self):
        items = [
            (ranked("a", "b"), {"a"}),
            (ranked("b", "a"), {"a"}),
            (ranked("b", "a"), {"b"}),
        ]
        per = per_class_recall_at_k(items, 1)
        assert per == {"a": 0.5, "b": 1.0}
        assert mean_recall_at_k(items, 1) == pytest.approx(0.75)

    def test_multi_label_item_counts_each_class(self):
        items = [(ranked("a", "b"), {"a", "b"})]
        per = per_class_recall_at_k(items, 1)
        assert per == {"a": 1.0, "b": 0.0}

    def test_validation(self):
        with pytest.raises(EmptyGroundTruthError):
            per_class_recall_at_k([], 1)
        with pytest.raises(ValueError, match="k must be"):
            per_class_recall_at_k([(ranked("a"), {"a"})], 0)


class TestTripletRank:
    def test_second_place(self):
        """A 0.9 vs 0.1 subject gap puts the true triple at rank 2."""
        s = [("a", 0.9), ("b", 0.1)]
        p = [("p", 1.0)]
        o = [("o", 1.0)]
        assert triplet_rank(s, p, o, ("b", "p", "o")) == 2
        assert triplet_rank(s, p, o, ("a", "p", "o")) == 1

    def test_missing_component_is_none(self):
        s = [("a", 0.9)]
        p = [("p", 1.0)]
        o = [("o", 1.0)]
        assert triplet_rank(s, p, o, ("b", "p", "o")) is None
        assert triplet_rank(s, p, o, ("a", "q", "o")) is None
        assert triplet_rank(s, p, o, ("a", "p", "x")) is None

    def test_lexical_tie_break(self):
        s = [("a", 0.5), ("b", 0.5)]
        p = [("p", 1.0)]
        o = [("o", 1.0)]
        # both triples score 0.5; the lexically smaller one ranks first
        assert triplet_rank(s, p, o, ("a", "p", "o")) == 1
        assert triplet_rank(s, p, o, ("b", "p", "o")) == 2

    def test_negative_scores_multiply_through(self):
        """Two negative components outrank a positive-negative pair."""
        s = [("neg", -1.0), ("pos", 0.5)]
        p = [("p", 1.0)]
        o = [("neg", -1.0), ("pos", 0.5)]
        # (neg, p, neg) scores +1.0, the best; (pos, p, pos) scores 0.25
        assert triplet_rank(s, p, o, ("neg", "p", "neg")) == 1
        assert triplet_rank(s, p, o, ("pos", "p", "pos")) == 2

    def test_brute_force_oracle(self):
        """Rank equals the position in a fully sorted candidate list."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            s = [(f"s{n}", float(rng.uniform(-1, 1))) for n in range(3)]
            p = [(f"p{n}", float(rng.uniform(-1, 1))) for n in range(2)]
            o = [(f"o{n}", float(rng.uniform(-1, 1))) for n in range(3)]
            cands = []
            for (sl, ss), (pl, ps), (ol, os_) in itertools.product(s, p, o):
                cands.append((ss * ps * os_, (sl, pl, ol)))
            cands.sort(key=lambda t: (-t[0], t[1]))
            gt = cands[int(rng.integers(len(cands)))][1]
            want = [triple for _, triple in cands].index(gt) + 1
            assert triplet_rank(s, p, o, gt) == want


class TestTripletRecall:
    def test_hand_oracle(self):
        s = [("a", 0.9), ("b", 0.1)]
        p = [("p", 1.0)]
        o = [("o", 1.0)]
        items = [
            (s, p, o, ("a", "p", "o")),  # rank 1
            (s, p, o, ("b", "p", "o")),  # rank 2
            (s, p, o, ("z", "p", "o")),  # not a candidate
        ]
        assert triplet_recall_at_k(items, 1) == pytest.approx(1 / 3)
        assert triplet_recall_at_k(items, 2) == pytest.approx(2 / 3)
        assert triplet_recall_at_k(items, 100) == pytest.approx(2 / 3)

    def test_validation(self):
        with pytest.raises(EmptyGroundTruthError):
            triplet_recall_at_k([], 1)
        with pytest.raises(ValueError, match="k must be"):
            triplet_recall_at_k([([], [], [], ("a", "b", "c"))], 0)


class TestFrequencySplit:
    def test_terciles_with_remainder_to_head(self):
        freqs = {f"c{n}": 100 - n for n in range(7)}
        split = make_frequency_split(freqs)
        assert [split[f"c{n}"] for n in range(7)] == [
            "head", "head", "head", "body", "body", "tail", "tail",
        ]

    def test_tie_broken_lexically(self):
        split = make_frequency_split({"b": 5, "a": 5, "c": 1})
        assert split == {"a": "head", "b": "body", "c": "tail"}

    def test_small_tables(self):
        assert make_frequency_split({"only": 3}) == {"only": "head"}
        split = make_frequency_split({"x": 2, "y": 1})
        assert split == {"x": "head", "y": "body"}

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            make_frequency_split({})


class TestSplitReport:
    SPLIT = {"a": "head", "b": "head", "c": "tail"}

    def test_bucket_means(self):
        out = split_report({"a": 1.0, "b": 0.0, "c": 0.5}, self.SPLIT)
        assert out == {"head": 0.5, "body": "n/a", "tail": 0.5}

    def test_unassigned_class_is_an_error(self):
        with pytest.raises(ValueError, match="missing from the frequency split"):
            split_report({"zz": 1.0}, self.SPLIT)


class TestAttributeTop1:
    def test_hand_oracle(self):
        gt = {1: "wooden", 2: "wooden", 3: "metal"}
        preds = {
            1: ranked("wooden", "metal"),
            2: ranked("metal", "wooden"),
            3: ranked("metal", "wooden"),
        }
        per, mean = attribute_top1(preds, gt)
        assert per == {"wooden": 0.5, "metal": 1.0}
        assert mean == pytest.approx(0.75)

    def test_missing_prediction_is_a_miss(self):
        per, mean = attribute_top1({}, {1: "wooden"})
        assert per == {"wooden": 0.0}
        assert mean == 0.0

    def test_empty_gt(self):
        with pytest.raises(EmptyGroundTruthError):
            attribute_top1({}, {})


def small_gt():
    return GroundTruthGraph(
        objects={1: "chair", 2: "table"},
        predicates={(1, 2): ["left of"]},
        object_classes=["chair", "table"],
        predicate_classes=["left of", "on top of"],
        attributes={1: "wooden"},
        attribute_classes=["wooden", "metal"],
    )


class TestGroundTruthGraph:
    def test_round_trip(self, tmp_path):
        gt = small_gt()
        d = gt.to_json_dict()
        back = GroundTruthGraph.from_json_dict(json.loads(json.dumps(d)))
        assert back == gt
        p = tmp_path / "scene.gt.json"
        p.write_text(json.dumps(d))
        assert GroundTruthGraph.load(p) == gt

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda g: g.objects.update({3: "sofa"}), "undeclared class"),
            (lambda g: g.predicates.update({(1, 9): ["left of"]}), "unknown nodes"),
            (lambda g: g.predicates.update({(2, 1): []}), "empty predicate list"),
            (lambda g: g.predicates.update({(2, 1): ["behind"]}), "undeclared predicate"),
            (lambda g: g.attributes.update({9: "wooden"}), "unknown node"),
            (lambda g: g.attributes.update({2: "plastic"}), "undeclared attribute"),
        ],
    )
    def test_validate_failures(self, mutate, message):
        gt = small_gt()
        mutate(gt)
        with pytest.raises(ValueError, match=message):
            gt.validate()


def perfect_graph(gt: GroundTruthGraph) -> PredictedSceneGraph:
    """Prediction that ranks every true label first."""
    g = PredictedSceneGraph()
    for i, label in gt.objects.items():
        others = [c for c in gt.object_classes if c != label]
        node = NodePrediction(id=i, labels=ranked(label, *others))
        if i in gt.attributes:
            wrong = [c for c in gt.attribute_classes if c != gt.attributes[i]]
            node.attributes = ranked(gt.attributes[i], *wrong)
        g.nodes.append(node)
    for (i, j), labels in gt.predicates.items():
        others = [c for c in gt.predicate_classes if c not in labels]
        g.edges.append(EdgePrediction(i=i, j=j, phrase=labels[0], mapped=ranked(labels[0], *others)))
    return g


class TestCollectItems:
    def test_structure(self):
        gt = small_gt()
        gt.predicates[(1, 2)] = ["left of", "on top of"]
        graph = perfect_graph(gt)
        object_items, predicate_items, triplet_items, attr_pred = collect_items(graph, gt)
        assert [truth for _, truth in object_items] == [{"chair"}, {"table"}]
        assert [truth for _, truth in predicate_items] == [{"left of", "on top of"}]
        # one triplet per (edge, true label), labels in sorted order
        assert [t[3] for t in triplet_items] == [
            ("chair", "left of", "table"),
            ("chair", "on top of", "table"),
        ]
        assert set(attr_pred) == {1}

    def test_missing_prediction_becomes_empty_ranking(self):
        gt = small_gt()
        graph = PredictedSceneGraph()  # predicted nothing at all
        object_items, predicate_items, triplet_items, _ = collect_items(graph, gt)
        assert object_items == [([], {"chair"}), ([], {"table"})]
        assert predicate_items == [([], {"left of"})]
        assert triplet_items[0][:3] == ([], [], [])


class TestEvaluate:
    def test_perfect_predictions_score_one(self):
        gts = {"scene0": small_gt(), "scene1": small_gt()}
        graphs = {s: perfect_graph(g) for s, g in gts.items()}
        report = evaluate(graphs, gts, object_ks=(1, 2), predicate_ks=(1,), triplet_ks=(1,))
        assert report["objects"]["R@1"] == 1.0
        assert report["objects"]["mR@2"] == 1.0
        assert report["predicates"]["R@1"] == 1.0
        assert report["triplets"]["R@1"] == 1.0
        assert report["counts"] == {"scenes": 2, "nodes": 4, "edges": 2, "triplets": 2}
        assert report["attributes"]["mean"] == 1.0
        assert report["splits"] is None

    def test_scene_set_mismatch(self):
        with pytest.raises(ValueError, match="scene sets differ"):
            evaluate({"a": PredictedSceneGraph()}, {"b": small_gt()})

    def test_frequency_split_section(self):
        gt = small_gt()
        split = make_frequency_split({"left of": 10, "on top of": 1})
        report = evaluate(
            {"s": perfect_graph(gt)}, {"s": gt}, predicate_ks=(1,), triplet_ks=(1,), frequency_split=split
        )
        assert report["splits"]["head"]["mR@1"] == 1.0
        assert report["splits"]["tail"]["mR@1"] == "n/a"

    def test_wrong_predictions_score_zero(self):
        gt = small_gt()
        graph = perfect_graph(gt)
        for n in graph.nodes:
            n.labels = list(reversed(n.labels))
        report = evaluate({"s": graph}, {"s": gt}, object_ks=(1,), predicate_ks=(1,), triplet_ks=(1,))
        assert report["objects"]["R@1"] == 0.0
        assert report["objects"]["mR@1"] == 0.0


class TestReportCsv:
    def test_shape(self):
        gt = small_gt()
        split = make_frequency_split({"left of": 10, "on top of": 1})
        report = evaluate(
            {"s": perfect_graph(gt)}, {"s": gt}, object_ks=(1,), predicate_ks=(1,), triplet_ks=(1,),
            frequency_split=split,
        )
        csv = report_to_csv(report)
        lines = csv.splitlines()
        assert lines[0] == "section,metric,value"
        assert "objects,R@1,1.0" in lines
        assert "splits.tail,mR@1,n/a" in lines
        assert "attributes,mean,1.0" in lines
        assert "counts,scenes,1" in lines
        assert csv.endswith("\n")
