"""Open-vocabulary querying over distilled scene graphs.

Inference is a two-step read of the trained features: nodes are classified by
cosine argmax against a text-embedding table, then each edge is decoded into a
free-text predicate phrase conditioned on the two predicted object labels
(ground-truth labels can be substituted to decouple the steps). Free text is
brought back onto a closed label set by ranking a lookup table in a text
embedder's space.

All rankings are cosine-ordered with deterministic tie-breaks: lexical for
labels, lowest index for nodes and edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import formats
from .decoder_client import DecoderError

PROMPT_TEMPLATE = "Describe the relationship between [object1] and [object2]?"


class UnclassifiableFeatureError(ValueError):
    """The feature has zero norm, so cosine ranking is meaningless."""


class UnknownTextError(KeyError):
    """A table-backed text embedder was asked for text outside its table."""


@dataclass(frozen=True)
class EmbeddingTable:
    """Labeled unit of text-embedding space: (label, vector) rows."""

    space: str
    labels: tuple
    vectors: np.ndarray  # (N, D) float32

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("embedding table needs at least one entry")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("embedding table labels must be unique")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.labels):
            raise ValueError("embedding table vectors must be (n_labels, dim)")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, label: str) -> np.ndarray:
        return self.vectors[self.labels.index(label)]

    def save(self, path) -> None:
        formats.write_embedding_table(path, self.space, self.dim, list(zip(self.labels, self.vectors)))

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        space, dim, entries = formats.read_embedding_table(path)
        labels = tuple(label for label, _ in entries)
        vectors = np.stack([vec for _, vec in entries]) if entries else np.zeros((0, dim), np.float32)
        return cls(space=space, labels=labels, vectors=vectors)


class TextEmbedder(Protocol):
    """text -> embedding vector in some table's space."""

    def embed(self, text: str) -> np.ndarray: ...


class TableTextEmbedder:
    """Exact-match text embedder backed by an EmbeddingTable.

    Stands in for a learned text encoder in fixtures and tests; any text not
    present as a table label is a typed failure rather than a guess.
    """

    def __init__(self, table: EmbeddingTable):
        self._table = table
        self._index = {label: k for k, label in enumerate(table.labels)}

    def embed(self, text: str) -> np.ndarray:
        if text not in self._index:
            raise UnknownTextError(f"text {text!r} is not in the {self._table.space!r} table")
        return self._table.vectors[self._index[text]]


def _cosines(vec: np.ndarray, mat: np.ndarray) -> np.ndarray:
    v = vec.astype(np.float64)
    m = mat.astype(np.float64)
    nv = np.linalg.norm(v) + 1e-8
    nm = np.linalg.norm(m, axis=1) + 1e-8
    return (m @ v) / (nm * nv)


def fuse(f2d: np.ndarray | None, f3d: np.ndarray) -> np.ndarray:
    """Average the 2D and 3D features; the 3D feature alone when 2D is missing."""
    f3d = np.asarray(f3d, dtype=np.float32)
    if f2d is None:
        return f3d
    f2d = np.asarray(f2d, dtype=np.float32)
    if f2d.shape != f3d.shape:
        raise ValueError(f"cannot fuse features of shapes {f2d.shape} and {f3d.shape}")
    return ((f2d.astype(np.float64) + f3d.astype(np.float64)) / 2.0).astype(np.float32)


def rank_by_cosine(vec: np.ndarray, table: EmbeddingTable, top_k: int | None = None):
    """(label, score) pairs sorted by cosine descending, ties broken lexically."""
    if vec.shape != (table.dim,):
        raise ValueError(f"feature dim {vec.shape} does not match table dim {table.dim}")
    scores = _cosines(vec, table.vectors)
    order = sorted(range(len(table.labels)), key=lambda n: (-scores[n], table.labels[n]))
    if top_k is not None:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        order = order[:top_k]
    return [(table.labels[n], float(scores[n])) for n in order]


def classify_node(fused: np.ndarray, table: EmbeddingTable, top_k: int | None = None):
    if not np.any(fused):
        raise UnclassifiableFeatureError("zero-norm feature cannot be ranked by cosine")
    return rank_by_cosine(np.asarray(fused, dtype=np.float32), table, top_k)


def query_attribute(fused: np.ndarray, attribute_table: EmbeddingTable, top_k: int | None = None):
    return classify_node(fused, attribute_table, top_k)


def map_to_label_set(phrase: str, lookup: EmbeddingTable, embedder: TextEmbedder, top_k: int | None = None):
    """Project a free-text phrase onto a closed label set by text-space cosine."""
    return rank_by_cosine(np.asarray(embedder.embed(phrase), dtype=np.float32), lookup, top_k)


def make_prompt(subject: str, obj: str, template: str = PROMPT_TEMPLATE) -> str:
    return template.replace("[object1]", subject).replace("[object2]", obj)


class NearestNeighborDecoder:
    """Relationship decoder that returns the nearest predicate-table label."""

    def __init__(self, table: EmbeddingTable):
        self.table = table

    def decode(self, edge_feature: np.ndarray, subject: str, obj: str, prompt: str) -> str:
        label, _ = rank_by_cosine(np.asarray(edge_feature, dtype=np.float32), self.table, top_k=1)[0]
        return label


class FallbackDecoder:
    """Try a primary decoder, fall back to a secondary on DecoderError (opt-in)."""

    def __init__(self, primary, secondary):
        self.primary = primary
        self.secondary = secondary

    def decode(self, edge_feature, subject, obj, prompt) -> str:
        try:
            return self.primary.decode(edge_feature, subject, obj, prompt)
        except DecoderError:
            return self.secondary.decode(edge_feature, subject, obj, prompt)


@dataclass
class NodePrediction:
    id: int
    labels: list  # ranked (label, score)
    fused: np.ndarray | None = None
    unclassifiable: bool = False
    attributes: list | None = None  # ranked (label, score) when an attribute table is given


@dataclass
class EdgePrediction:
    i: int
    j: int
    phrase: str | None
    mapped: list  # ranked (label, score) over the closed set; empty on failure
    fused: np.ndarray | None = None
    error: str | None = None


@dataclass
class PredictedSceneGraph:
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)

    def node(self, node_id: int) -> NodePrediction:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"unknown node id {node_id}")

    def to_json_dict(self) -> dict:
        out = {"nodes": [], "edges": []}
        for n in self.nodes:
            row = {"id": n.id, "labels": [[l, s] for l, s in n.labels]}
            if n.unclassifiable:
                row["unclassifiable"] = True
            if n.attributes is not None:
                row["attributes"] = [[l, s] for l, s in n.attributes]
            out["nodes"].append(row)
        for e in self.edges:
            row = {"i": e.i, "j": e.j, "phrase": e.phrase, "mapped": [[l, s] for l, s in e.mapped]}
            if e.error is not None:
                row["error"] = e.error
            out["edges"].append(row)
        return out

    @classmethod
    def from_json_dict(cls, d: dict) -> "PredictedSceneGraph":
        g = cls()
        for row in d["nodes"]:
            g.nodes.append(
                NodePrediction(
                    id=int(row["id"]),
                    labels=[(l, float(s)) for l, s in row["labels"]],
                    unclassifiable=bool(row.get("unclassifiable", False)),
                    attributes=[(l, float(s)) for l, s in row["attributes"]] if "attributes" in row else None,
                )
            )
        for row in d["edges"]:
            g.edges.append(
                EdgePrediction(
                    i=int(row["i"]),
                    j=int(row["j"]),
                    phrase=row["phrase"],
                    mapped=[(l, float(s)) for l, s in row["mapped"]],
                    error=row.get("error"),
                )
            )
        return g


def build_graph(
    node_features: dict,
    edge_features: dict,
    targets2d,
    object_table: EmbeddingTable,
    decoder,
    lookup_table: EmbeddingTable | None = None,
    text_embedder: TextEmbedder | None = None,
    top_k: int | None = None,
    gt_labels: dict | None = None,
    attribute_table: EmbeddingTable | None = None,
    prompt_template: str = PROMPT_TEMPLATE,
) -> PredictedSceneGraph:
    """Fuse, classify, decode, and map one scene into a PredictedSceneGraph.

    node_features / edge_features hold the distilled 3D features keyed by
    instance id / (i, j); targets2d (a FusedTargets or None) supplies the 2D
    side of the ensemble where present. gt_labels substitutes ground-truth
    subject/object labels into the decoding step when provided. Decoder
    failures mark the edge and never abort the scene.
    """
    graph = PredictedSceneGraph()
    fused_nodes = {}
    top1 = {}
    for i in sorted(node_features):
        f2d = targets2d.node_targets.get(i) if targets2d is not None else None
        fv = fuse(f2d, node_features[i])
        fused_nodes[i] = fv
        try:
            ranked = classify_node(fv, object_table, top_k)
            node = NodePrediction(id=i, labels=ranked, fused=fv)
            top1[i] = ranked[0][0]
        except UnclassifiableFeatureError:
            node = NodePrediction(id=i, labels=[], fused=fv, unclassifiable=True)
            top1[i] = ""
        if attribute_table is not None and not node.unclassifiable:
            node.attributes = query_attribute(fv, attribute_table, top_k)
        graph.nodes.append(node)

    pairs = sorted(edge_features)
    requests_ = []
    fused_edges = {}
    for (i, j) in pairs:
        f2d = targets2d.edge_targets.get((i, j)) if targets2d is not None else None
        fv = fuse(f2d, edge_features[(i, j)])
        fused_edges[(i, j)] = fv
        if gt_labels is not None:
            subj, obj = gt_labels.get(i, top1.get(i, "")), gt_labels.get(j, top1.get(j, ""))
        else:
            subj, obj = top1.get(i, ""), top1.get(j, "")
        requests_.append((fv, subj, obj, make_prompt(subj, obj, prompt_template)))

    if hasattr(decoder, "decode_many"):
        outcomes = decoder.decode_many(requests_)
    else:
        outcomes = []
        for item in requests_:
            try:
                outcomes.append(decoder.decode(*item))
            except DecoderError as exc:
                outcomes.append(exc)

    for (i, j), outcome in zip(pairs, outcomes):
        if isinstance(outcome, DecoderError):
            graph.edges.append(
                EdgePrediction(i=i, j=j, phrase=None, mapped=[], fused=fused_edges[(i, j)], error=str(outcome))
            )
            continue
        mapped = []
        if lookup_table is not None and text_embedder is not None:
            mapped = map_to_label_set(outcome, lookup_table, text_embedder, top_k)
        graph.edges.append(EdgePrediction(i=i, j=j, phrase=outcome, mapped=mapped, fused=fused_edges[(i, j)]))
    return graph


def query_nodes(graph: PredictedSceneGraph, text: str, embedder: TextEmbedder, top_k: int | None = None):
    """Rank the graph's nodes by cosine between their fused feature and the text."""
    qv = np.asarray(embedder.embed(text), dtype=np.float64)
    nq = np.linalg.norm(qv) + 1e-8
    scored = []
    for n in graph.nodes:
        if n.fused is None:
            continue
        fv = n.fused.astype(np.float64)
        cos = float(fv @ qv / ((np.linalg.norm(fv) + 1e-8) * nq))
        scored.append((n.id, cos))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:top_k] if top_k is not None else scored


def localize_triplet(
    graph: PredictedSceneGraph,
    query: tuple,
    object_embedder: TextEmbedder,
    lookup_embedder: TextEmbedder,
):
    """Find the edge best matching a (subject, predicate, object) text query.

    Each edge scores the mean of three cosines: query subject vs. the subject
    node's fused feature, query predicate vs. the edge's decoded phrase (both
    embedded in the lookup text space), and query object vs. the object node's
    fused feature. Returns ((i, j), score); ties go to the lowest (i, j).
    Edges with failed decodes are skipped.
    """
    if not graph.edges:
        raise ValueError("cannot localize in a graph with no edges")
    s_text, p_text, o_text = query
    sv = np.asarray(object_embedder.embed(s_text), dtype=np.float64)
    pv = np.asarray(lookup_embedder.embed(p_text), dtype=np.float64)
    ov = np.asarray(object_embedder.embed(o_text), dtype=np.float64)

    def cos(a, b):
        return float(a @ b / ((np.linalg.norm(a) + 1e-8) * (np.linalg.norm(b) + 1e-8)))

    fused = {n.id: n.fused for n in graph.nodes}
    best = None
    for e in sorted(graph.edges, key=lambda e: (e.i, e.j)):
        if e.phrase is None or fused.get(e.i) is None or fused.get(e.j) is None:
            continue
        ev = np.asarray(lookup_embedder.embed(e.phrase), dtype=np.float64)
        score = (cos(sv, fused[e.i].astype(np.float64)) + cos(pv, ev) + cos(ov, fused[e.j].astype(np.float64))) / 3.0
        if best is None or score > best[1]:
            best = ((e.i, e.j), score)
    if best is None:
        raise ValueError("no decodable edges to localize over")
    return best
