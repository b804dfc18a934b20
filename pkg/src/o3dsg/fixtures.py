"""Deterministic synthetic fixture: scenes, frames, oracle embeddings, GT.

Each scene is four boxes with known semantics: a floor slab, a table standing
on it, a chair placed to one side, and a lamp standing on the table. Points
are sampled on box surfaces (a scan, not a volume), three elevated cameras
render z-buffer depth from the cloud itself, and every embedding artifact is
a fixed orthonormal class prototype plus configurable Gaussian noise:

  - pixel-embedding grids carry the prototype of the instance winning the
    z-buffer at that pixel;
  - crop embeddings carry the prototype of the pair's true predicate. A
    union crop covers both orders of a pair, so each unordered pair gets one
    canonical annotated direction (lower id first when both hold); pairs with
    no spatial relation get a reserved background prototype so their
    distillation target is consistent rather than zero;
  - text tables map labels to the same prototypes, which makes nearest
    neighbor lookups an exact oracle.

Relationship ground truth is single-label via a priority rule: standing on
beats above beats left/right. Everything derives from one master seed, so
regeneration is byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import formats
from .features import DEFAULT_SCALES, union_box
from .infer import EmbeddingTable
from .projection import CameraFrame, project_instance, project_points
from .scene import InstanceSet, ScenePointCloud, build_skeleton
from .selection import SelectionParams, select_all

OBJECT_CLASSES = ("chair", "floor", "lamp", "table")
PREDICATE_CLASSES = ("above", "left of", "right of", "standing on")
BACKGROUND_PREDICATE = "unrelated to"
ATTRIBUTE_CLASSES = ("fabric", "metal", "stone", "wood")
MATERIAL_OF = {"floor": "stone", "table": "wood", "chair": "fabric", "lamp": "metal"}

CLASS_DIMS = {
    "floor": (4.0, 4.0, 0.08),
    "table": (1.2, 0.8, 0.75),
    "chair": (0.5, 0.5, 0.9),
    "lamp": (0.12, 0.12, 0.6),
}
CLASS_POINTS = {"floor": 700, "table": 400, "chair": 300, "lamp": 150}
CLASS_COLORS = {"floor": (110, 110, 110), "table": (150, 100, 40), "chair": (40, 90, 160), "lamp": (220, 200, 60)}
INSTANCE_IDS = {"floor": 1, "table": 2, "chair": 3, "lamp": 4}

IMAGE_SIZE = 64
D_OBJ = 16
D_REL = 16
D_LOOKUP = 8


def orthonormal_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Random orthonormal prototype rows via Gram-Schmidt."""
    if n > dim:
        raise ValueError("cannot build more orthonormal rows than dimensions")
    rows = []
    while len(rows) < n:
        v = rng.normal(size=dim)
        for u in rows:
            v = v - (v @ u) * u
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            rows.append(v / norm)
    return np.asarray(rows, dtype=np.float32)


def sample_box_surface(rng: np.random.Generator, lo, hi, n: int) -> np.ndarray:
    """Sample points on the box faces, weighted by face area."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[2], ext[0] * ext[1], ext[0] * ext[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(size=(n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts.astype(np.float32)


def make_layout(rng: np.random.Generator, chair_side: float) -> dict:
    """Random placements; returns class -> (lo, hi) world-space boxes.

    chair_side (+1 or -1) fixes which side of the table the chair sits on so a
    scene set can cover both directions deterministically.
    """
    boxes = {}
    fx, fy, fz = CLASS_DIMS["floor"]
    boxes["floor"] = (np.array([-fx / 2, -fy / 2, 0.0]), np.array([fx / 2, fy / 2, fz]))
    top = fz

    tx, ty, tz = CLASS_DIMS["table"]
    tcx = rng.uniform(-0.5, 0.5)
    tcy = rng.uniform(-0.5, 0.5)
    boxes["table"] = (
        np.array([tcx - tx / 2, tcy - ty / 2, top]),
        np.array([tcx + tx / 2, tcy + ty / 2, top + tz]),
    )

    cx_dim, cy_dim, cz_dim = CLASS_DIMS["chair"]
    gap = rng.uniform(0.25, 0.55)
    ccx = tcx + chair_side * (tx / 2 + cx_dim / 2 + gap)
    ccy = ty / 2 * rng.uniform(-0.8, 0.8) + tcy
    boxes["chair"] = (
        np.array([ccx - cx_dim / 2, ccy - cy_dim / 2, top]),
        np.array([ccx + cx_dim / 2, ccy + cy_dim / 2, top + cz_dim]),
    )

    lx, ly, lz = CLASS_DIMS["lamp"]
    lcx = tcx + rng.uniform(-0.25, 0.25)
    lcy = tcy + rng.uniform(-0.15, 0.15)
    table_top = top + tz
    boxes["lamp"] = (
        np.array([lcx - lx / 2, lcy - ly / 2, table_top]),
        np.array([lcx + lx / 2, lcy + ly / 2, table_top + lz]),
    )
    return boxes


def geometric_predicate(boxes: dict, ci: str, cj: str) -> str | None:
    """Single-label priority oracle: standing on > above > left/right of."""
    lo_i, hi_i = boxes[ci]
    lo_j, hi_j = boxes[cj]

    def xy_overlap():
        return lo_i[0] < hi_j[0] and lo_j[0] < hi_i[0] and lo_i[1] < hi_j[1] and lo_j[1] < hi_i[1]

    if abs(lo_i[2] - hi_j[2]) <= 0.02 and xy_overlap():
        return "standing on"
    center_z = (lo_i[2] + hi_i[2]) / 2
    if center_z > hi_j[2] and xy_overlap():
        return "above"
    if hi_i[0] < lo_j[0]:
        return "left of"
    if lo_i[0] > hi_j[0]:
        return "right of"
    return None


def look_at(position, target) -> np.ndarray:
    """World-to-camera extrinsics (3x4), +z forward, +y down in the image."""
    c = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - c
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return np.concatenate([rot, (-rot @ c)[:, None]], axis=1)


def render_depth(points: np.ndarray, ids: np.ndarray, frame: CameraFrame):
    """Z-buffer the cloud into (depth, winner-instance) grids; empty pixels are 0."""
    uvw = project_points(frame, points)
    w = uvw[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.floor(uvw[:, 0] / w).astype(np.int64)
        py = np.floor(uvw[:, 1] / w).astype(np.int64)
    ok = (w > 0) & (px >= 0) & (px < frame.width) & (py >= 0) & (py < frame.height)
    depth = np.full((frame.height, frame.width), np.inf, dtype=np.float64)
    winner = np.zeros((frame.height, frame.width), dtype=np.uint32)
    for k in np.flatnonzero(ok):
        if w[k] < depth[py[k], px[k]]:
            depth[py[k], px[k]] = w[k]
            winner[py[k], px[k]] = ids[k]
    depth[np.isinf(depth)] = 0.0
    return depth.astype(np.float32), winner


def default_frames(image_size: int = IMAGE_SIZE):
    """Three elevated viewpoints covering the scene from different sides."""
    f = 1.25 * image_size
    c = image_size / 2.0
    intr = np.array([[f, 0, c], [0, f, c], [0, 0, 1]], dtype=np.float64)
    poses = [
        ((0.0, -4.6, 3.2), (0.0, 0.0, 0.5)),
        ((4.6, 0.6, 2.6), (0.0, 0.0, 0.5)),
        ((-3.6, 3.6, 4.2), (0.0, 0.0, 0.3)),
    ]
    return [(intr, look_at(p, t)) for p, t in poses]


class FixtureError(RuntimeError):
    """The generated fixture failed one of its own consistency checks."""


def _build_scene(rng, name, out_dir, protos, params, noise, image_size, chair_side):
    """Generate one scene's files; returns (manifest path, gt dict, frame count)."""
    obj_protos, pred_protos, _ = protos
    boxes = make_layout(rng, chair_side)
    chunks, colors, ids = [], [], []
    for cls in ("floor", "table", "chair", "lamp"):
        lo, hi = boxes[cls]
        pts = sample_box_surface(rng, lo, hi, CLASS_POINTS[cls])
        chunks.append(pts)
        col = np.array(CLASS_COLORS[cls], dtype=np.float64)
        jitter = rng.integers(-15, 16, size=(len(pts), 3))
        colors.append(np.clip(col + jitter, 0, 255).astype(np.uint8))
        ids.append(np.full(len(pts), INSTANCE_IDS[cls], dtype=np.uint32))
    cloud = ScenePointCloud(
        points=np.concatenate(chunks),
        colors=np.concatenate(colors),
        instance_ids=np.concatenate(ids),
    )
    formats.write_point_cloud(out_dir / f"{name}.o3pc", cloud.points, cloud.colors, cloud.instance_ids)

    class_of = {INSTANCE_IDS[c]: c for c in INSTANCE_IDS}
    frames = []
    frame_rows = []
    for k, (intr, extr) in enumerate(default_frames(image_size)):
        depth_path = out_dir / f"{name}.frame{k}.o3dp"
        pe_path = out_dir / f"{name}.frame{k}.o3pe"
        frame = CameraFrame(
            index=k, width=image_size, height=image_size,
            intrinsics=intr, extrinsics=extr,
            depth=np.zeros((image_size, image_size), dtype=np.float32),
        )
        depth, winner = render_depth(cloud.points, cloud.instance_ids, frame)
        formats.write_depth(depth_path, depth)

        grid = np.zeros((image_size, image_size, D_OBJ), dtype=np.float32)
        occupied = winner > 0
        for inst_id in np.unique(winner[occupied]):
            cls_idx = OBJECT_CLASSES.index(class_of[int(inst_id)])
            grid[winner == inst_id] = obj_protos[cls_idx]
        if noise > 0:
            grid[occupied] += rng.normal(0.0, noise, size=(int(occupied.sum()), D_OBJ)).astype(np.float32)
        formats.write_pixel_embeddings(pe_path, grid)

        frames.append(CameraFrame(
            index=k, width=image_size, height=image_size,
            intrinsics=intr, extrinsics=extr, depth=depth,
            pixel_embeddings_path=pe_path,
        ))
        frame_rows.append({
            "width": image_size, "height": image_size,
            "intrinsics": [float(x) for x in intr.reshape(-1)],
            "extrinsics": [float(x) for x in extr.reshape(-1)],
            "depth": depth_path.name,
            "pixel_embeddings": pe_path.name,
            "rgb": None,
        })

    inst = InstanceSet.from_cloud(cloud)
    skeleton = build_skeleton(inst)
    selection = select_all(frames, cloud, inst, skeleton, params)

    # Union crops are shared by both orders of a pair, so only one directed
    # label per unordered pair is learnable from 2D; annotate that direction.
    gt_predicates = {}
    for (i, j) in skeleton.edges:
        if i > j:
            continue
        forward = geometric_predicate(boxes, class_of[i], class_of[j])
        backward = geometric_predicate(boxes, class_of[j], class_of[i])
        if forward is not None:
            gt_predicates[(i, j)] = [forward]
        elif backward is not None:
            gt_predicates[(j, i)] = [backward]

    for i in skeleton.nodes:
        if not selection.objects.get(i):
            raise FixtureError(f"{name}: object {class_of[i]} selected no frames")
    for pair in gt_predicates:
        if not selection.pairs.get(pair):
            raise FixtureError(f"{name}: related pair {pair} selected no frames")

    crop_records = []
    for (i, j), chosen in sorted(selection.pairs.items()):
        if i > j:
            continue
        entry = gt_predicates.get((i, j)) or gt_predicates.get((j, i))
        label = entry[0] if entry else BACKGROUND_PREDICATE
        if label == BACKGROUND_PREDICATE:
            proto = pred_protos[len(PREDICATE_CLASSES)]
        else:
            proto = pred_protos[PREDICATE_CLASSES.index(label)]
        for k in chosen:
            pi = project_instance(frames[k], cloud, inst, i, t_occ=params.t_occ)
            pj = project_instance(frames[k], cloud, inst, j, t_occ=params.t_occ)
            box = union_box(pi.box2d, pj.box2d)
            for scale in DEFAULT_SCALES:
                vec = proto.copy()
                if noise > 0:
                    vec += rng.normal(0.0, noise, size=D_REL).astype(np.float32)
                crop_records.append((k, box, scale, vec))
    formats.write_crop_embeddings(out_dir / f"{name}.o3ce", D_REL, crop_records)

    manifest = {"cloud": f"{name}.o3pc", "frames": frame_rows}
    manifest_path = out_dir / f"{name}.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))

    gt = {
        "objects": {str(i): class_of[i] for i in skeleton.nodes},
        "predicates": {f"{i},{j}": labels for (i, j), labels in sorted(gt_predicates.items())},
        "object_classes": list(OBJECT_CLASSES),
        "predicate_classes": list(PREDICATE_CLASSES),
        "attributes": {str(i): MATERIAL_OF[class_of[i]] for i in skeleton.nodes},
        "attribute_classes": list(ATTRIBUTE_CLASSES),
    }
    (out_dir / f"{name}.gt.json").write_text(json.dumps(gt, indent=1))
    return manifest_path, gt


def generate_fixture(
    out_dir,
    seed: int = 7,
    noise: float = 0.01,
    n_train: int = 4,
    n_eval: int = 4,
    image_size: int = IMAGE_SIZE,
    t_occ: float = 0.10,
    t_vis: float = 0.3,
    t_box: float = 0.2,
    k_frames: int = 5,
) -> dict:
    """Write the full fixture tree; returns the pipeline config dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = SelectionParams(t_vis=t_vis, t_box=t_box, t_occ=t_occ, k=k_frames)
    params.validate()

    proto_rng = np.random.default_rng(seed)
    obj_protos = orthonormal_rows(proto_rng, len(OBJECT_CLASSES), D_OBJ)
    pred_protos = orthonormal_rows(proto_rng, len(PREDICATE_CLASSES) + 1, D_REL)  # +1 background
    lookup_protos = orthonormal_rows(proto_rng, len(PREDICATE_CLASSES), D_LOOKUP)

    EmbeddingTable("object-text", OBJECT_CLASSES, obj_protos).save(out_dir / "object_table.o3et")
    EmbeddingTable("predicate-text", PREDICATE_CLASSES, pred_protos[: len(PREDICATE_CLASSES)]).save(
        out_dir / "predicate_table.o3et"
    )
    EmbeddingTable("lookup-text", PREDICATE_CLASSES, lookup_protos).save(out_dir / "lookup_table.o3et")
    attr_vectors = np.stack([obj_protos[OBJECT_CLASSES.index(cls)] for cls in ("chair", "lamp", "floor", "table")])
    EmbeddingTable("attribute-text", ATTRIBUTE_CLASSES, attr_vectors).save(out_dir / "attribute_table.o3et")

    protos = (obj_protos, pred_protos, lookup_protos)
    train_manifests, eval_manifests = [], []
    freq = {p: 0 for p in PREDICATE_CLASSES}
    for s in range(n_train):
        rng = np.random.default_rng([seed, 1, s])
        side = 1.0 if s % 2 == 0 else -1.0
        path, gt = _build_scene(rng, f"scene{s}", out_dir, protos, params, noise, image_size, side)
        train_manifests.append(path.name)
        for labels in gt["predicates"].values():
            for p in labels:
                freq[p] += 1
    for s in range(n_eval):
        rng = np.random.default_rng([seed, 2, s])
        side = 1.0 if s % 2 == 0 else -1.0
        path, _ = _build_scene(rng, f"eval{s}", out_dir, protos, params, noise, image_size, side)
        eval_manifests.append(path.name)

    (out_dir / "frequencies.json").write_text(json.dumps(freq, indent=1, sort_keys=True))

    config = {
        "paths": {
            "train_manifests": train_manifests,
            "eval_manifests": eval_manifests,
            "object_table": "object_table.o3et",
            "predicate_table": "predicate_table.o3et",
            "lookup_table": "lookup_table.o3et",
            "attribute_table": "attribute_table.o3et",
            "frequencies": "frequencies.json",
            "workdir": "work",
        },
        "selection": {"t_occ": t_occ, "t_vis": t_vis, "t_box": t_box, "k_frames": k_frames},
        "features": {"scales": list(DEFAULT_SCALES)},
        "prune_distance": None,
        "model": {"d_obj": D_OBJ, "d_rel": D_REL},
        "train": {},
        "infer": {},
        "eval": {},
        "fixture": {
            "out_dir": ".",
            "seed": seed,
            "noise": noise,
            "n_train": n_train,
            "n_eval": n_eval,
            "image_size": image_size,
        },
    }
    (out_dir / "pipeline.json").write_text(json.dumps(config, indent=1))
    return config
