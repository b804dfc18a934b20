"""2D feature extraction targets: pixel pooling, union crops, frame aggregation.

The vision-language models themselves stay outside the artifact; they appear
here only as embedder capabilities. A pixel embedder turns a frame index into
a dense grid (possibly stored at reduced resolution, sampled
nearest-neighbor), a crop embedder turns (frame, pixel box, scale) into one
vector. Both must be deterministic and safe to call from multiple workers.

Aggregates are arithmetic means with a fixed summation order (by frame index,
then scale), accumulated in float64, so results are independent of worker
scheduling and of frame-list permutations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import formats
from .projection import ProjectedInstance, project_instance
from .selection import SelectionResult

DEFAULT_SCALES = (1.0, 1.5, 2.0)


class PixelEmbedder(Protocol):
    """frame index -> (H', W', D) embedding grid; deterministic."""

    def grid(self, frame: int) -> np.ndarray: ...


class CropEmbedder(Protocol):
    """(frame index, pixel box, scale factor) -> (D,) vector; deterministic."""

    def embed(self, frame: int, box: tuple, scale: float) -> np.ndarray: ...


class MissingCropEmbeddingError(KeyError):
    """The crop cache holds no record for the requested (frame, box, scale)."""


class ArrayPixelEmbedder:
    """Pixel embedder over in-memory grids, keyed by frame index."""

    def __init__(self, grids: dict):
        self._grids = grids

    def grid(self, frame: int) -> np.ndarray:
        return self._grids[frame]


class FilePixelEmbedder:
    """Loads per-frame O3PE grids lazily and caches them."""

    def __init__(self, frames):
        self._paths = {f.index: f.pixel_embeddings_path for f in frames}
        self._cache = {}

    def grid(self, frame: int) -> np.ndarray:
        if frame not in self._cache:
            path = self._paths.get(frame)
            if path is None:
                raise KeyError(f"frame {frame} has no pixel-embedding file")
            self._cache[frame] = formats.read_pixel_embeddings(path)
        return self._cache[frame]


class CropEmbeddingCache:
    """Crop embedder backed by a precomputed O3CE cache file."""

    def __init__(self, dim: int, records):
        self.dim = dim
        self._table = {}
        for frame, box, scale, vec in records:
            self._table[self._key(frame, box, scale)] = vec

    @staticmethod
    def _key(frame: int, box: tuple, scale: float):
        # Scales are stored as f32 in the file; round-trip the lookup value the
        # same way so float noise cannot miss the key.
        return (int(frame), tuple(int(c) for c in box), float(np.float32(scale)))

    @classmethod
    def load(cls, path) -> "CropEmbeddingCache":
        dim, records = formats.read_crop_embeddings(path)
        return cls(dim, records)

    def embed(self, frame: int, box: tuple, scale: float) -> np.ndarray:
        key = self._key(frame, box, scale)
        if key not in self._table:
            raise MissingCropEmbeddingError(f"no cached crop embedding for frame={frame} box={box} scale={scale}")
        return self._table[key]


@dataclass
class FusedTargets:
    """Per-node / per-edge 2D targets plus the frames that produced them; absent targets stay None."""

    d_obj: int
    d_rel: int
    node_targets: dict = field(default_factory=dict)  # id -> (D_obj,) f32 or None
    edge_targets: dict = field(default_factory=dict)  # (i, j) -> (D_rel,) f32 or None
    node_frames: dict = field(default_factory=dict)  # id -> contributing frame indices
    edge_frames: dict = field(default_factory=dict)

    def save(self, path) -> None:
        formats.write_fused_targets(
            path,
            self.d_obj,
            self.d_rel,
            [(i, self.node_targets[i]) for i in sorted(self.node_targets)],
            [(e, self.edge_targets[e]) for e in sorted(self.edge_targets)],
        )

    @classmethod
    def load(cls, path) -> "FusedTargets":
        d_obj, d_rel, nodes, edges = formats.read_fused_targets(path)
        out = cls(d_obj=d_obj, d_rel=d_rel)
        for i, vec in nodes:
            out.node_targets[int(i)] = vec
        for (i, j), vec in edges:
            out.edge_targets[(int(i), int(j))] = vec
        return out


def sample_grid(grid: np.ndarray, pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbor sample of a (possibly reduced) grid at full-res pixels."""
    gh, gw = grid.shape[:2]
    gx = np.minimum((pixels[:, 0] * gw) // width, gw - 1)
    gy = np.minimum((pixels[:, 1] * gh) // height, gh - 1)
    return grid[gy, gx]


def object_feature_in_frame(
    embedder: PixelEmbedder, proj: ProjectedInstance, width: int, height: int
) -> np.ndarray:
    """Average-pool pixel embeddings over the instance's valid pixels."""
    if proj.pixels.shape[0] == 0:
        raise ValueError(f"instance {proj.instance} has no valid pixels in frame {proj.frame}")
    samples = sample_grid(embedder.grid(proj.frame), proj.pixels, width, height)
    return samples.astype(np.float64).mean(axis=0).astype(np.float32)


def union_box(box_i: tuple, box_j: tuple) -> tuple:
    return (
        min(box_i[0], box_j[0]),
        min(box_i[1], box_j[1]),
        max(box_i[2], box_j[2]),
        max(box_i[3], box_j[3]),
    )


def expand_box(box: tuple, scale: float, width: int, height: int) -> tuple:
    """Grow a pixel box around its center by ``scale``, clamped to the image."""
    x0, y0, x1, y1 = box
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hx, hy = (x1 - x0) / 2.0 * scale, (y1 - y0) / 2.0 * scale
    return (
        max(0, int(np.floor(cx - hx))),
        max(0, int(np.floor(cy - hy))),
        min(width - 1, int(np.ceil(cx + hx))),
        min(height - 1, int(np.ceil(cy + hy))),
    )


def relationship_feature_in_frame(
    embedder: CropEmbedder, frame: int, box_i: tuple, box_j: tuple, scales=DEFAULT_SCALES
) -> np.ndarray:
    """Mean of the union-crop embedding over the requested scales."""
    if not scales:
        raise ValueError("scales must be non-empty")
    box = union_box(box_i, box_j)
    if box[2] < box[0] or box[3] < box[1]:
        raise ValueError(f"degenerate union box {box}")
    acc = None
    for s in scales:
        vec = np.asarray(embedder.embed(frame, box, s), dtype=np.float64)
        acc = vec if acc is None else acc + vec
    return (acc / len(scales)).astype(np.float32)


def aggregate_targets(
    frames,
    cloud,
    inst,
    selection: SelectionResult,
    pixel_embedder: PixelEmbedder,
    crop_embedder: CropEmbedder,
    t_occ: float,
    scales=DEFAULT_SCALES,
) -> FusedTargets:
    """Average per-frame features across each node's / edge's selected frames.

    Nodes or edges whose selection came back empty get an explicit missing
    marker (None); they are later excluded from the distillation loss rather
    than imputed as zeros.
    """
    frame_by_index = {f.index: f for f in frames}
    d_obj = d_rel = None
    out_nodes, out_edges = {}, {}
    node_frames, edge_frames = {}, {}
    proj_cache = {}

    def proj(i, k):
        if (i, k) not in proj_cache:
            proj_cache[(i, k)] = project_instance(frame_by_index[k], cloud, inst, i, t_occ=t_occ)
        return proj_cache[(i, k)]

    for i in sorted(selection.objects):
        chosen = sorted(selection.objects[i])
        if not chosen:
            out_nodes[i], node_frames[i] = None, []
            continue
        acc = None
        for k in chosen:
            f = frame_by_index[k]
            vec = object_feature_in_frame(pixel_embedder, proj(i, k), f.width, f.height).astype(np.float64)
            if d_obj is None:
                d_obj = vec.shape[0]
            elif vec.shape[0] != d_obj:
                raise ValueError(f"object embedding dim changed across frames: {vec.shape[0]} != {d_obj}")
            acc = vec if acc is None else acc + vec
        out_nodes[i] = (acc / len(chosen)).astype(np.float32)
        node_frames[i] = chosen

    for (i, j) in sorted(selection.pairs):
        chosen = sorted(selection.pairs[(i, j)])
        if not chosen:
            out_edges[(i, j)], edge_frames[(i, j)] = None, []
            continue
        acc = None
        for k in chosen:
            pi, pj = proj(i, k), proj(j, k)
            vec = relationship_feature_in_frame(crop_embedder, k, pi.box2d, pj.box2d, scales).astype(np.float64)
            if d_rel is None:
                d_rel = vec.shape[0]
            elif vec.shape[0] != d_rel:
                raise ValueError(f"relationship embedding dim changed across frames: {vec.shape[0]} != {d_rel}")
            acc = vec if acc is None else acc + vec
        out_edges[(i, j)] = (acc / len(chosen)).astype(np.float32)
        edge_frames[(i, j)] = chosen

    return FusedTargets(
        d_obj=d_obj if d_obj is not None else 0,
        d_rel=d_rel if d_rel is not None else 0,
        node_targets=out_nodes,
        edge_targets=out_edges,
        node_frames=node_frames,
        edge_frames=edge_frames,
    )
