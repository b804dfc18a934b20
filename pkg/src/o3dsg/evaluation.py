"""Closed-set benchmark harness: R@k, mR@k, triplet recall, long-tail splits.

Items are pooled across scenes before any ratio is taken. Edges may carry
several true predicates; an edge counts as hit when any of them appears in
its top-k (per-class recall instead asks about that class's own retrieval).
Triplets are ranked by the product of their component scores among all
candidate (subject, predicate, object) combinations for their edge, with
score ties broken by lexical triple order. Cosine scores can be negative, so
products of two negatives outrank products with one; the rank is whatever the
scores imply, no clamping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

BUCKETS = ("head", "body", "tail")


class EmptyGroundTruthError(ValueError):
    """A recall over zero ground-truth items is undefined."""


@dataclass
class GroundTruthGraph:
    objects: dict  # node id -> class label
    predicates: dict  # (i, j) -> list of true predicate labels
    object_classes: list
    predicate_classes: list
    attributes: dict = field(default_factory=dict)  # node id -> attribute label, optional
    attribute_classes: list = field(default_factory=list)

    def validate(self) -> None:
        for i, label in self.objects.items():
            if label not in self.object_classes:
                raise ValueError(f"object {i} has undeclared class {label!r}")
        for (i, j), labels in self.predicates.items():
            if i not in self.objects or j not in self.objects:
                raise ValueError(f"edge ({i},{j}) references unknown nodes")
            if not labels:
                raise ValueError(f"edge ({i},{j}) has an empty predicate list")
            for p in labels:
                if p not in self.predicate_classes:
                    raise ValueError(f"edge ({i},{j}) has undeclared predicate {p!r}")
        for i, label in self.attributes.items():
            if i not in self.objects:
                raise ValueError(f"attribute entry references unknown node {i}")
            if label not in self.attribute_classes:
                raise ValueError(f"node {i} has undeclared attribute {label!r}")

    @classmethod
    def from_json_dict(cls, d: dict) -> "GroundTruthGraph":
        predicates = {}
        for key, labels in d.get("predicates", {}).items():
            i, j = key.split(",")
            predicates[(int(i), int(j))] = list(labels)
        gt = cls(
            objects={int(k): v for k, v in d.get("objects", {}).items()},
            predicates=predicates,
            object_classes=list(d.get("object_classes", [])),
            predicate_classes=list(d.get("predicate_classes", [])),
            attributes={int(k): v for k, v in d.get("attributes", {}).items()},
            attribute_classes=list(d.get("attribute_classes", [])),
        )
        gt.validate()
        return gt

    def to_json_dict(self) -> dict:
        d = {
            "objects": {str(k): v for k, v in sorted(self.objects.items())},
            "predicates": {f"{i},{j}": list(v) for (i, j), v in sorted(self.predicates.items())},
            "object_classes": list(self.object_classes),
            "predicate_classes": list(self.predicate_classes),
        }
        if self.attributes:
            d["attributes"] = {str(k): v for k, v in sorted(self.attributes.items())}
            d["attribute_classes"] = list(self.attribute_classes)
        return d

    @classmethod
    def load(cls, path) -> "GroundTruthGraph":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _top_labels(ranking, k: int):
    return [label for label, _ in ranking[:k]]


def recall_at_k(items, k: int) -> float:
    """items: (ranked (label, score) list, set/list of true labels) pairs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not items:
        raise EmptyGroundTruthError("recall over zero ground-truth items")
    hits = 0
    for ranking, true_labels in items:
        top = _top_labels(ranking, k)
        if any(t in top for t in true_labels):
            hits += 1
    return hits / len(items)


def per_class_recall_at_k(items, k: int) -> dict:
    """Per-class recall: for class c, over items whose truth contains c, is c itself retrieved."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not items:
        raise EmptyGroundTruthError("recall over zero ground-truth items")
    totals, hits = {}, {}
    for ranking, true_labels in items:
        top = _top_labels(ranking, k)
        for c in true_labels:
            totals[c] = totals.get(c, 0) + 1
            if c in top:
                hits[c] = hits.get(c, 0) + 1
    return {c: hits.get(c, 0) / totals[c] for c in totals}


def mean_recall_at_k(items, k: int) -> float:
    per_class = per_class_recall_at_k(items, k)
    return sum(per_class.values()) / len(per_class)


def triplet_rank(subject_ranking, predicate_ranking, object_ranking, gt_triple):
    """Rank of the true triple among all candidate combinations, or None.

    Candidates are scored by the product of their three component scores and
    ordered by (-score, lexical triple). None means some component label never
    appears in its ranking, so the true triple is not a candidate at all.
    """
    s_scores = dict(subject_ranking)
    p_scores = dict(predicate_ranking)
    o_scores = dict(object_ranking)
    s_gt, p_gt, o_gt = gt_triple
    if s_gt not in s_scores or p_gt not in p_scores or o_gt not in o_scores:
        return None
    gt_score = s_scores[s_gt] * p_scores[p_gt] * o_scores[o_gt]
    rank = 1
    for s, ss in s_scores.items():
        for p, ps in p_scores.items():
            so = ss * ps
            for o, os_ in o_scores.items():
                if (s, p, o) == gt_triple:
                    continue
                score = so * os_
                if score > gt_score or (score == gt_score and (s, p, o) < gt_triple):
                    rank += 1
    return rank


def triplet_recall_at_k(items, k: int) -> float:
    """items: (subject_ranking, predicate_ranking, object_ranking, gt_triple) tuples."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not items:
        raise EmptyGroundTruthError("recall over zero ground-truth triplets")
    hits = 0
    for s_rank, p_rank, o_rank, gt_triple in items:
        rank = triplet_rank(s_rank, p_rank, o_rank, gt_triple)
        if rank is not None and rank <= k:
            hits += 1
    return hits / len(items)


def make_frequency_split(freqs: dict) -> dict:
    """Tercile buckets over classes sorted by descending count (ties lexical).

    Group sizes differ by at most one; the remainder goes to the earlier
    buckets, so head is never smaller than tail.
    """
    if not freqs:
        raise ValueError("frequency table is empty")
    ordered = sorted(freqs, key=lambda c: (-freqs[c], c))
    n = len(ordered)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if b < rem else 0) for b in range(3)]
    split = {}
    pos = 0
    for bucket, size in zip(BUCKETS, sizes):
        for c in ordered[pos:pos + size]:
            split[c] = bucket
        pos += size
    return split


def split_report(per_class: dict, split: dict) -> dict:
    """Bucket-wise unweighted means of per-class recalls; empty buckets are 'n/a'."""
    missing = [c for c in per_class if c not in split]
    if missing:
        raise ValueError(f"classes missing from the frequency split: {sorted(missing)}")
    out = {}
    for bucket in BUCKETS:
        vals = [r for c, r in per_class.items() if split[c] == bucket]
        out[bucket] = sum(vals) / len(vals) if vals else "n/a"
    return out


def attribute_top1(predictions: dict, gt: dict):
    """Per-class and mean top-1 accuracy of per-instance attribute predictions.

    predictions: node id -> ranked (label, score); gt: node id -> true label.
    """
    if not gt:
        raise EmptyGroundTruthError("no ground-truth attributes")
    totals, hits = {}, {}
    for i, true_label in gt.items():
        totals[true_label] = totals.get(true_label, 0) + 1
        ranking = predictions.get(i) or []
        if ranking and ranking[0][0] == true_label:
            hits[true_label] = hits.get(true_label, 0) + 1
    per_class = {c: hits.get(c, 0) / totals[c] for c in totals}
    return per_class, sum(per_class.values()) / len(per_class)


# -- scene-level assembly -----------------------------------------------------


def collect_items(graph, gt: GroundTruthGraph):
    """Pull pooled metric items for one scene from a PredictedSceneGraph."""
    node_rank = {n.id: n.labels for n in graph.nodes}
    edge_rank = {(e.i, e.j): e.mapped for e in graph.edges}
    object_items = [(node_rank.get(i, []), {label}) for i, label in sorted(gt.objects.items())]
    predicate_items = [
        (edge_rank.get(pair, []), set(labels)) for pair, labels in sorted(gt.predicates.items())
    ]
    triplet_items = []
    for (i, j), labels in sorted(gt.predicates.items()):
        for p in sorted(labels):
            triplet_items.append(
                (node_rank.get(i, []), edge_rank.get((i, j), []), node_rank.get(j, []),
                 (gt.objects[i], p, gt.objects[j]))
            )
    attr_pred = {n.id: n.attributes for n in graph.nodes if n.attributes is not None}
    return object_items, predicate_items, triplet_items, attr_pred


def evaluate(
    graphs: dict,
    gts: dict,
    object_ks=(1, 3, 5, 10),
    predicate_ks=(1, 3, 5),
    triplet_ks=(1, 50, 100),
    frequency_split: dict | None = None,
) -> dict:
    """Pooled metrics over {scene: PredictedSceneGraph} vs {scene: GroundTruthGraph}."""
    if set(graphs) != set(gts):
        raise ValueError(f"scene sets differ: {sorted(set(graphs) ^ set(gts))}")
    object_items, predicate_items, triplet_items = [], [], []
    attr_pred, attr_gt = {}, {}
    for scene in sorted(gts):
        oi, pi, ti, ap = collect_items(graphs[scene], gts[scene])
        object_items += oi
        predicate_items += pi
        triplet_items += ti
        for i, ranking in ap.items():
            attr_pred[(scene, i)] = ranking
        for i, label in gts[scene].attributes.items():
            attr_gt[(scene, i)] = label

    report = {
        "objects": {},
        "predicates": {},
        "triplets": {},
        "splits": None,
        "attributes": None,
        "counts": {
            "scenes": len(gts),
            "nodes": len(object_items),
            "edges": len(predicate_items),
            "triplets": len(triplet_items),
        },
    }
    for k in object_ks:
        report["objects"][f"R@{k}"] = recall_at_k(object_items, k)
        report["objects"][f"mR@{k}"] = mean_recall_at_k(object_items, k)
    for k in predicate_ks:
        report["predicates"][f"R@{k}"] = recall_at_k(predicate_items, k)
        report["predicates"][f"mR@{k}"] = mean_recall_at_k(predicate_items, k)
    for k in triplet_ks:
        report["triplets"][f"R@{k}"] = triplet_recall_at_k(triplet_items, k)
    if frequency_split is not None:
        report["splits"] = {}
        for k in predicate_ks:
            per_class = per_class_recall_at_k(predicate_items, k)
            for bucket, value in split_report(per_class, frequency_split).items():
                report["splits"].setdefault(bucket, {})[f"mR@{k}"] = value
    if attr_gt:
        per_class, mean = attribute_top1(attr_pred, attr_gt)
        report["attributes"] = {"per_class": per_class, "mean": mean}
    return report


def report_to_csv(report: dict) -> str:
    """Flatten the report into section,metric,value lines."""
    lines = ["section,metric,value"]

    def emit(section, metrics):
        for name, value in metrics.items():
            lines.append(f"{section},{name},{value}")

    emit("objects", report["objects"])
    emit("predicates", report["predicates"])
    emit("triplets", report["triplets"])
    if report.get("splits"):
        for bucket, metrics in report["splits"].items():
            emit(f"splits.{bucket}", metrics)
    if report.get("attributes"):
        emit("attributes", {"mean": report["attributes"]["mean"]})
        emit("attributes.per_class", report["attributes"]["per_class"])
    emit("counts", report["counts"])
    return "\n".join(lines) + "\n"
