"""Operator surface: pipeline stages, fixture generation, interactive REPL.

Command grammar:

    o3dsg <gen-fixture|select-frames|extract|train|infer|eval|repl>
          --config <path> [--set key=value ...]

Exit codes: 0 success, 1 usage or config error, 2 data error (missing or
malformed artifacts), 3 external-service error. Commands never mutate their
inputs; all outputs land under the configured workdir with the active config
echoed into each artifact.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from . import fixtures, formats
from .config import ConfigError, PipelineConfig
from .decoder_client import DecoderError, ExternalDecoder
from .evaluation import EmptyGroundTruthError, GroundTruthGraph, evaluate, make_frequency_split, report_to_csv
from .features import CropEmbeddingCache, FilePixelEmbedder, FusedTargets, aggregate_targets
from .infer import (
    EmbeddingTable,
    FallbackDecoder,
    NearestNeighborDecoder,
    PredictedSceneGraph,
    TableTextEmbedder,
    UnknownTextError,
    build_graph,
    classify_node,
    localize_triplet,
    query_nodes,
)
from .net.model import SceneGraphModel, prepare_scene
from .net.train import TrainingDivergedError, load_checkpoint, train
from .scene import build_skeleton, load_scene
from .selection import SelectionResult, select_all


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="o3dsg", description="Open-vocabulary 3D scene graph pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("gen-fixture", "generate the synthetic oracle fixture"),
        ("select-frames", "pick top frames per object and pair"),
        ("extract", "aggregate 2D features into distillation targets"),
        ("train", "distill targets into the 3D network"),
        ("infer", "predict open-vocabulary scene graphs"),
        ("eval", "score predictions against ground truth"),
        ("repl", "interactive query session over one scene"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="pipeline config JSON")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")
    return parser


def _manifests(cfg: PipelineConfig) -> list:
    seen, out = set(), []
    for p in cfg.manifests("train") + cfg.manifests("eval"):
        if p.stem not in seen:
            seen.add(p.stem)
            out.append(p)
    return out


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; {hint}")
    return path


def _load_table(cfg: PipelineConfig, name: str, required: bool) -> EmbeddingTable | None:
    path = cfg.table_path(name)
    if path is None:
        if required:
            raise ConfigError(f"paths.{name}_table", "required for this command")
        return None
    return EmbeddingTable.load(_require(path, "check paths in the config"))


def cmd_gen_fixture(cfg: PipelineConfig) -> int:
    f = cfg.data["fixture"]
    s = cfg.data["selection"]
    out = cfg.resolve(f["out_dir"])
    fixtures.generate_fixture(
        out,
        seed=f["seed"],
        noise=f["noise"],
        n_train=f["n_train"],
        n_eval=f["n_eval"],
        image_size=f["image_size"],
        t_occ=s["t_occ"],
        t_vis=s["t_vis"],
        t_box=s["t_box"],
        k_frames=s["k_frames"],
    )
    print(f"fixture written to {out}")
    return 0


def cmd_select_frames(cfg: PipelineConfig) -> int:
    params = cfg.selection_params()
    out = cfg.workdir() / "selection"
    out.mkdir(parents=True, exist_ok=True)
    for manifest in _manifests(cfg):
        cloud, inst, frames = load_scene(manifest)
        skeleton = build_skeleton(inst, cfg.data["prune_distance"])
        result = select_all(frames, cloud, inst, skeleton, params)
        blob = {"config": cfg.data["selection"], **result.to_json_dict()}
        (out / f"{manifest.stem}.json").write_text(json.dumps(blob, indent=1))
        print(f"{manifest.stem}: {len(result.objects)} objects, {len(result.pairs)} pairs")
    return 0


def cmd_extract(cfg: PipelineConfig) -> int:
    params = cfg.selection_params()
    sel_dir = cfg.workdir() / "selection"
    out = cfg.workdir() / "targets"
    out.mkdir(parents=True, exist_ok=True)
    for manifest in _manifests(cfg):
        sel_path = _require(sel_dir / f"{manifest.stem}.json", "run select-frames first")
        selection = SelectionResult.from_json_dict(json.loads(sel_path.read_text()))
        cloud, inst, frames = load_scene(manifest)
        crops = CropEmbeddingCache.load(_require(manifest.with_suffix(".o3ce"), "crop embedding cache not found"))
        targets = aggregate_targets(
            frames, cloud, inst, selection,
            FilePixelEmbedder(frames), crops,
            t_occ=params.t_occ, scales=cfg.scales(),
        )
        targets.save(out / f"{manifest.stem}.o3ft")
        n_present = sum(1 for v in targets.node_targets.values() if v is not None)
        e_present = sum(1 for v in targets.edge_targets.values() if v is not None)
        print(f"{manifest.stem}: {n_present} node targets, {e_present} edge targets")
    return 0


def _prepared(cfg: PipelineConfig, manifest: Path, model_cfg):
    cloud, inst, frames = load_scene(manifest)
    skeleton = build_skeleton(inst, cfg.data["prune_distance"])
    return prepare_scene(cloud, inst, skeleton, model_cfg, manifest.stem)


def cmd_train(cfg: PipelineConfig) -> int:
    model_cfg = cfg.model_config()
    tdir = cfg.workdir() / "targets"
    scenes = []
    for manifest in cfg.manifests("train"):
        targets = FusedTargets.load(_require(tdir / f"{manifest.stem}.o3ft", "run extract first"))
        scenes.append((_prepared(cfg, manifest, model_cfg), targets))
    ckpt_dir = cfg.workdir() / "checkpoints"

    def log(epoch, loss):
        if epoch % 25 == 0 or epoch == cfg.train_config().epochs:
            print(f"epoch {epoch}: loss {loss:.6f}")

    state, history = train(model_cfg, cfg.train_config(), scenes, out_dir=ckpt_dir, log=log)
    blob = {"config": cfg.data, "loss": history}
    (cfg.workdir() / "history.json").write_text(json.dumps(blob, indent=1))
    if history:
        print(f"final loss {history[-1]:.6f} -> {ckpt_dir / 'final.o3ck'}")
    return 0


def _load_model(cfg: PipelineConfig) -> SceneGraphModel:
    ckpt = _require(cfg.workdir() / "checkpoints" / "final.o3ck", "run train first")
    state = load_checkpoint(ckpt)
    return SceneGraphModel(state.model_cfg, params=state.params)


def _make_decoder(cfg: PipelineConfig, predicate_table: EmbeddingTable):
    inf = cfg.data["infer"]
    nearest = NearestNeighborDecoder(predicate_table)
    if inf["decoder"] == "nearest":
        return nearest
    external = ExternalDecoder(inf["endpoint"], timeout=inf["timeout"], max_in_flight=inf["max_in_flight"])
    return FallbackDecoder(external, nearest) if inf["fallback"] else external


def _infer_scene(cfg: PipelineConfig, manifest: Path, model, object_table, decoder, lookup_table, attribute_table):
    scene = _prepared(cfg, manifest, model.cfg)
    n_out, e_out, _ = model.forward(scene)
    node_features = {i: n_out[k] for k, i in enumerate(scene.node_ids)}
    edge_features = {pair: e_out[k] for k, pair in enumerate(scene.edge_pairs)}
    targets_path = cfg.workdir() / "targets" / f"{manifest.stem}.o3ft"
    targets2d = FusedTargets.load(targets_path) if targets_path.exists() else None
    gt_labels = None
    if cfg.data["infer"]["use_gt_labels"]:
        gt = GroundTruthGraph.load(_require(manifest.with_suffix(".gt.json"), "ground truth needed for gt labels"))
        gt_labels = gt.objects
    embedder = TableTextEmbedder(lookup_table) if lookup_table is not None else None
    return build_graph(
        node_features, edge_features, targets2d, object_table, decoder,
        lookup_table=lookup_table, text_embedder=embedder,
        top_k=cfg.data["infer"]["top_k"], gt_labels=gt_labels, attribute_table=attribute_table,
    )


def cmd_infer(cfg: PipelineConfig) -> int:
    model = _load_model(cfg)
    object_table = _load_table(cfg, "object", required=True)
    predicate_table = _load_table(cfg, "predicate", required=True)
    lookup_table = _load_table(cfg, "lookup", required=False)
    attribute_table = _load_table(cfg, "attribute", required=False)
    decoder = _make_decoder(cfg, predicate_table)
    out = cfg.workdir() / "graphs"
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for manifest in cfg.manifests("eval"):
        graph = _infer_scene(cfg, manifest, model, object_table, decoder, lookup_table, attribute_table)
        failures += sum(1 for e in graph.edges if e.error is not None)
        blob = {"config": cfg.data, "scene": manifest.stem, **graph.to_json_dict()}
        (out / f"{manifest.stem}.json").write_text(json.dumps(blob, indent=1))
        print(f"{manifest.stem}: {len(graph.nodes)} nodes, {len(graph.edges)} edges")
    if failures:
        print(f"warning: {failures} edge decodes failed (marked in the graphs)", file=sys.stderr)
        if cfg.data["infer"]["decoder"] == "external" and not cfg.data["infer"]["fallback"]:
            return 3
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    graphs_dir = cfg.workdir() / "graphs"
    graphs, gts = {}, {}
    for manifest in cfg.manifests("eval"):
        gpath = _require(graphs_dir / f"{manifest.stem}.json", "run infer first")
        graphs[manifest.stem] = PredictedSceneGraph.from_json_dict(json.loads(gpath.read_text()))
        gts[manifest.stem] = GroundTruthGraph.load(_require(manifest.with_suffix(".gt.json"), "ground truth missing"))
    split = None
    freq_path = cfg.data["paths"]["frequencies"]
    if freq_path is not None:
        split = make_frequency_split(json.loads(cfg.resolve(freq_path).read_text()))
    e = cfg.data["eval"]
    report = evaluate(
        graphs, gts,
        object_ks=tuple(e["object_ks"]),
        predicate_ks=tuple(e["predicate_ks"]),
        triplet_ks=tuple(e["triplet_ks"]),
        frequency_split=split,
    )
    report["config"] = cfg.data
    (cfg.workdir() / "report.json").write_text(json.dumps(report, indent=1))
    (cfg.workdir() / "report.csv").write_text(report_to_csv(report))
    for section in ("objects", "predicates", "triplets"):
        line = "  ".join(f"{k}={v:.4f}" for k, v in report[section].items())
        print(f"{section}: {line}")
    return 0


# -- REPL ---------------------------------------------------------------------


def _fmt_pairs(pairs) -> str:
    return "\t".join(f"{label}\t{score:.6f}" for label, score in pairs)


class _Repl:
    def __init__(self, cfg: PipelineConfig, graph: PredictedSceneGraph, object_table, lookup_table, attribute_table):
        self.cfg = cfg
        self.graph = graph
        self.object_table = object_table
        self.lookup_table = lookup_table
        self.attribute_table = attribute_table
        self.object_embedder = TableTextEmbedder(object_table) if object_table else None
        self.lookup_embedder = TableTextEmbedder(lookup_table) if lookup_table else None

    def handle(self, line: str, out) -> bool:
        """Execute one command; returns False when the session should end."""
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            print(f"error: {exc}", file=out)
            return True
        if not parts:
            return True
        cmd, args = parts[0], parts[1:]
        try:
            if cmd in ("exit", "quit"):
                return False
            if cmd == "classify":
                node = self.graph.node(int(args[0]))
                k = int(args[1]) if len(args) > 1 else None
                if node.unclassifiable or not node.labels:
                    print("error: node is unclassifiable", file=out)
                else:
                    print(_fmt_pairs(node.labels[:k] if k else node.labels), file=out)
            elif cmd == "query":
                if self.object_embedder is None:
                    print("error: query disabled (no object table configured)", file=out)
                else:
                    k = int(args[1]) if len(args) > 1 else None
                    ranked = query_nodes(self.graph, args[0], self.object_embedder, top_k=k)
                    print("\t".join(f"{i}\t{s:.6f}" for i, s in ranked), file=out)
            elif cmd == "relate":
                i, j = int(args[0]), int(args[1])
                edge = next((e for e in self.graph.edges if (e.i, e.j) == (i, j)), None)
                if edge is None:
                    print(f"error: no edge ({i},{j})", file=out)
                elif edge.error is not None:
                    print(f"error: {edge.error}", file=out)
                else:
                    tail = "\t" + _fmt_pairs(edge.mapped) if edge.mapped else ""
                    print(f"{edge.phrase}{tail}", file=out)
            elif cmd == "localize":
                if self.object_embedder is None or self.lookup_embedder is None:
                    print("error: localize needs object and lookup tables", file=out)
                else:
                    (i, j), score = localize_triplet(
                        self.graph, (args[0], args[1], args[2]), self.object_embedder, self.lookup_embedder
                    )
                    print(f"{i}\t{j}\t{score:.6f}", file=out)
            elif cmd == "attr":
                table = self.attribute_table
                if len(args) > 1:
                    table = EmbeddingTable.load(self.cfg.resolve(args[1]))
                if table is None:
                    print("error: no attribute table configured", file=out)
                else:
                    node = self.graph.node(int(args[0]))
                    print(_fmt_pairs(classify_node(node.fused, table)), file=out)
            elif cmd == "help":
                print("commands: classify <id> [k] | query <text> [k] | relate <i> <j> | "
                      "localize <subject> <predicate> <object> | attr <id> [table] | exit", file=out)
            else:
                print(f"error: unknown command {cmd!r}", file=out)
        except (IndexError, ValueError, KeyError, UnknownTextError) as exc:
            print(f"error: {exc}", file=out)
        return True


def cmd_repl(cfg: PipelineConfig, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    manifest = cfg.data["repl"]["manifest"]
    if not manifest:
        raise ConfigError("repl.manifest", "required for the repl command")
    manifest = cfg.resolve(manifest)
    model = _load_model(cfg)
    object_table = _load_table(cfg, "object", required=True)
    predicate_table = _load_table(cfg, "predicate", required=True)
    lookup_table = _load_table(cfg, "lookup", required=False)
    attribute_table = _load_table(cfg, "attribute", required=False)
    decoder = _make_decoder(cfg, predicate_table)
    graph = _infer_scene(cfg, manifest, model, object_table, decoder, lookup_table, attribute_table)
    repl = _Repl(cfg, graph, object_table, lookup_table, attribute_table)
    interactive = hasattr(stdin, "isatty") and stdin.isatty()
    while True:
        if interactive:
            stdout.write("o3dsg> ")
            stdout.flush()
        line = stdin.readline()
        if not line:
            return 0
        if not repl.handle(line, stdout):
            return 0


HANDLERS = {
    "gen-fixture": cmd_gen_fixture,
    "select-frames": cmd_select_frames,
    "extract": cmd_extract,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "repl": cmd_repl,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = PipelineConfig.load(args.config, args.set)
        return HANDLERS[args.command](cfg) or 0
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 1
    except DecoderError as exc:
        print(f"external decoder error: {exc}", file=sys.stderr)
        return 3
    except (formats.ParseError, FileNotFoundError, EmptyGroundTruthError, TrainingDivergedError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
