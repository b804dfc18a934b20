"""Scene data model: point cloud, instance masks, pair point sets, graph skeleton.

Everything here is immutable after construction (feature slots on the skeleton
are filled once by the pipeline before any concurrent reads), so downstream
workers can share objects freely.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .formats import ParseError
from .projection import CameraFrame


@dataclass(frozen=True)
class ScenePointCloud:
    """Raw 3D substrate: one position, color, and instance id per point."""

    points: np.ndarray  # (N, 3) f32, meters
    colors: np.ndarray  # (N, 3) u8
    instance_ids: np.ndarray  # (N,) u32

    def __post_init__(self):
        n = self.points.shape[0]
        if n < 1:
            raise ValueError("cloud must contain at least one point")
        if self.points.shape != (n, 3) or self.colors.shape != (n, 3) or self.instance_ids.shape != (n,):
            raise ValueError("points/colors/instance_ids shape mismatch")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class InstanceSet:
    """Per-instance point indices and tight axis-aligned bounding boxes."""

    ids: tuple  # sorted unique instance ids
    point_index: dict  # id -> (K,) int indices into the cloud
    aabb: dict  # id -> (min_xyz f64 (3,), max_xyz f64 (3,))

    @classmethod
    def from_cloud(cls, cloud: ScenePointCloud) -> "InstanceSet":
        ids = tuple(int(i) for i in np.unique(cloud.instance_ids))
        point_index = {}
        aabb = {}
        for i in ids:
            idx = np.nonzero(cloud.instance_ids == i)[0]
            pts = cloud.points[idx].astype(np.float64)
            point_index[i] = idx
            aabb[i] = (pts.min(axis=0), pts.max(axis=0))
        return cls(ids=ids, point_index=point_index, aabb=aabb)

    def require(self, i: int) -> None:
        if i not in self.point_index:
            raise KeyError(f"unknown instance id {i}")

    def center(self, i: int) -> np.ndarray:
        lo, hi = self.aabb[i]
        return (lo + hi) / 2.0


@dataclass(frozen=True)
class PairPointSet:
    """Points inside the union of two instances' boxes, with a 0/1/2 mask channel."""

    i: int
    j: int
    points: np.ndarray  # (K, 3) f32
    mask_channel: np.ndarray  # (K,) u8; 1 = instance i, 2 = instance j, 0 = bystander
    source_indices: np.ndarray  # (K,) indices into the originating cloud


@dataclass
class FeatureSlots:
    f2d: np.ndarray | None = None
    f3d: np.ndarray | None = None
    fused: np.ndarray | None = None


@dataclass(frozen=True)
class SceneGraphSkeleton:
    """Instance nodes plus directed candidate edges with attachable feature slots."""

    nodes: tuple  # instance ids, sorted
    edges: tuple  # ordered (i, j) pairs, i != j, sorted
    node_feature_slots: dict = field(default_factory=dict)  # id -> FeatureSlots
    edge_feature_slots: dict = field(default_factory=dict)  # (i, j) -> FeatureSlots


def _in_box(points: np.ndarray, box) -> np.ndarray:
    lo, hi = box
    # Closed intervals: boundary points are members.
    return np.all((points >= lo) & (points <= hi), axis=1)


def build_pair_set(cloud: ScenePointCloud, inst: InstanceSet, i: int, j: int) -> PairPointSet:
    """Points falling in box(i) union box(j), masked 1 for i, 2 for j, 0 otherwise.

    Output preserves input point order, so the result is deterministic and
    equal membership-wise for (i, j) and (j, i).
    """
    if i == j:
        raise ValueError(f"pair requires two distinct instances, got {i} twice")
    inst.require(i)
    inst.require(j)
    pts = cloud.points.astype(np.float64)
    member = _in_box(pts, inst.aabb[i]) | _in_box(pts, inst.aabb[j])
    idx = np.nonzero(member)[0]
    mask = np.zeros(idx.shape[0], dtype=np.uint8)
    mask[cloud.instance_ids[idx] == i] = 1
    mask[cloud.instance_ids[idx] == j] = 2
    return PairPointSet(i=i, j=j, points=cloud.points[idx], mask_channel=mask, source_indices=idx)


def build_skeleton(inst: InstanceSet, max_pair_distance: float | None = None) -> SceneGraphSkeleton:
    """Fully-connected directed skeleton, optionally pruned by AABB-center distance.

    With a limit d, the ordered edge (i, j) is kept iff ||center_i - center_j|| <= d.
    Both directions are materialized because relationships are directional.
    """
    if not inst.ids:
        raise ValueError("need at least one instance")
    nodes = tuple(inst.ids)
    edges = []
    for i in nodes:
        for j in nodes:
            if i == j:
                continue
            if max_pair_distance is not None:
                dist = float(np.linalg.norm(inst.center(i) - inst.center(j)))
                if dist > max_pair_distance:
                    continue
            edges.append((i, j))
    return SceneGraphSkeleton(
        nodes=nodes,
        edges=tuple(edges),
        node_feature_slots={i: FeatureSlots() for i in nodes},
        edge_feature_slots={e: FeatureSlots() for e in edges},
    )


# ---------------------------------------------------------------------------
# Scene manifest
# ---------------------------------------------------------------------------

def _manifest_field(manifest: dict, key: str, path) -> object:
    if key not in manifest:
        raise ParseError(path, key, "missing manifest field")
    return manifest[key]


def load_scene(manifest_path):
    """Load a scene manifest plus its binary payloads.

    Returns (cloud, instances, frames). Frame-relative paths in the manifest
    resolve against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ParseError(manifest_path, "file", "missing file")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(manifest_path, "json", str(exc)) from None
    base = manifest_path.parent

    cloud_path = base / _manifest_field(manifest, "cloud", manifest_path)
    points, colors, instance_ids = formats.read_point_cloud(cloud_path)
    cloud = ScenePointCloud(points=points, colors=colors, instance_ids=instance_ids)
    inst = InstanceSet.from_cloud(cloud)

    frames = []
    for k, spec in enumerate(_manifest_field(manifest, "frames", manifest_path)):
        where = f"frames[{k}]"
        for key in ("width", "height", "intrinsics", "extrinsics", "depth"):
            if key not in spec:
                raise ParseError(manifest_path, f"{where}.{key}", "missing manifest field")
        intr = np.asarray(spec["intrinsics"], dtype=np.float64)
        if intr.shape != (9,):
            raise ParseError(manifest_path, f"{where}.intrinsics", f"expected 9 numbers, got shape {intr.shape}")
        extr = np.asarray(spec["extrinsics"], dtype=np.float64)
        if extr.shape != (12,):
            raise ParseError(manifest_path, f"{where}.extrinsics", f"expected 12 numbers, got shape {extr.shape}")
        depth = formats.read_depth(base / spec["depth"])
        pe = spec.get("pixel_embeddings")
        rgb = spec.get("rgb")
        frame = CameraFrame(
            index=k,
            width=int(spec["width"]),
            height=int(spec["height"]),
            intrinsics=intr.reshape(3, 3),
            extrinsics=extr.reshape(3, 4),
            depth=depth,
            pixel_embeddings_path=str(base / pe) if pe else None,
            rgb_path=str(base / rgb) if rgb else None,
        )
        try:
            frame.validate()
        except ValueError as exc:
            raise ParseError(manifest_path, where, str(exc)) from None
        frames.append(frame)
    return cloud, inst, frames


def save_scene_payloads(cloud: ScenePointCloud, cloud_path, frames=(), depth_paths=()) -> None:
    """Re-emit the binary payloads of a loaded scene (round-trip support)."""
    formats.write_point_cloud(cloud_path, cloud.points, cloud.colors, cloud.instance_ids)
    for frame, path in zip(frames, depth_paths):
        formats.write_depth(path, frame.depth)
