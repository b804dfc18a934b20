"""Pinhole projection of instance points into frames.

A point is a valid observation in a frame when it lands in front of the
camera, its floored pixel lies inside the image, the depth map carries a
measurement there, and the point is not occluded (its camera-space depth does
not exceed the measured depth by more than ``t_occ``). Missing depth (0 or
NaN) rejects the point: a point we cannot verify is not counted as visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .scene import InstanceSet, ScenePointCloud

DEFAULT_T_OCC = 0.10  # meters; absorbs typical consumer depth noise


@dataclass(frozen=True)
class CameraFrame:
    """One posed RGB-D frame: intrinsics, world-to-camera extrinsics, depth."""

    index: int
    width: int
    height: int
    intrinsics: np.ndarray  # (3, 3)
    extrinsics: np.ndarray  # (3, 4) world -> camera
    depth: np.ndarray  # (H, W) f32 meters; 0.0 / NaN = no measurement
    pixel_embeddings_path: str | None = None
    rgb_path: str | None = None

    def validate(self) -> None:
        fx, fy = self.intrinsics[0, 0], self.intrinsics[1, 1]
        cx, cy = self.intrinsics[0, 2], self.intrinsics[1, 2]
        if fx <= 0 or fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx < self.width):
            raise ValueError(f"principal point cx={cx} outside [0, {self.width})")
        if not (0 <= cy < self.height):
            raise ValueError(f"principal point cy={cy} outside [0, {self.height})")
        if self.depth.shape != (self.height, self.width):
            raise ValueError(f"depth shape {self.depth.shape} != (H, W)=({self.height}, {self.width})")


@dataclass(frozen=True)
class ProjectedInstance:
    """Valid pixel observations of one instance in one frame."""

    frame: int
    instance: int
    pixels: np.ndarray  # (K, 2) int (u, v), one row per valid point (duplicates kept)
    vis: float  # |valid points| / |instance points|, exact
    box2d: tuple | None  # (min_x, min_y, max_x, max_y) in pixels, or None

    def area_fraction(self, width: int, height: int) -> float:
        if self.box2d is None:
            return 0.0
        x0, y0, x1, y1 = self.box2d
        return float((x1 - x0 + 1) * (y1 - y0 + 1)) / float(width * height)


def project_point(frame: CameraFrame, p) -> tuple:
    """Homogeneous image coordinates (u, v, w) of one world point.

    w is the camera-space depth; w <= 0 means the point is behind (or on) the
    camera plane and the caller must treat it as invalid.
    """
    p = np.asarray(p, dtype=np.float64)
    cam = frame.extrinsics[:, :3] @ p + frame.extrinsics[:, 3]
    uvw = frame.intrinsics @ cam
    return float(uvw[0]), float(uvw[1]), float(uvw[2])


def project_points(frame: CameraFrame, points: np.ndarray) -> np.ndarray:
    """Vectorized project_point: (N, 3) world points -> (N, 3) of (u, v, w)."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ frame.extrinsics[:, :3].T + frame.extrinsics[:, 3]
    return cam @ frame.intrinsics.T


def project_instance(
    frame: CameraFrame,
    cloud: "ScenePointCloud",
    inst: "InstanceSet",
    i: int,
    t_occ: float = DEFAULT_T_OCC,
) -> ProjectedInstance:
    """Project all points of instance ``i`` into ``frame`` and keep the valid ones."""
    if t_occ <= 0:
        raise ValueError(f"t_occ must be positive, got {t_occ}")
    inst.require(i)
    idx = inst.point_index[i]
    uvw = project_points(frame, cloud.points[idx])
    n = idx.shape[0]

    w = uvw[:, 2]
    in_front = w > 0
    # Guard the division; points behind the camera are already invalid.
    safe_w = np.where(in_front, w, 1.0)
    u_px = np.floor(uvw[:, 0] / safe_w).astype(np.int64)
    v_px = np.floor(uvw[:, 1] / safe_w).astype(np.int64)
    in_image = in_front & (u_px >= 0) & (u_px <= frame.width - 1) & (v_px >= 0) & (v_px <= frame.height - 1)

    valid = np.zeros(n, dtype=bool)
    sel = np.nonzero(in_image)[0]
    if sel.size:
        d = frame.depth[v_px[sel], u_px[sel]].astype(np.float64)
        measured = np.isfinite(d) & (d != 0.0)
        passes = measured & ((w[sel] - d) <= t_occ)
        valid[sel[passes]] = True

    pix = np.stack([u_px[valid], v_px[valid]], axis=1) if valid.any() else np.zeros((0, 2), dtype=np.int64)
    vis = float(valid.sum()) / float(n)
    if pix.shape[0]:
        box2d = (int(pix[:, 0].min()), int(pix[:, 1].min()), int(pix[:, 0].max()), int(pix[:, 1].max()))
    else:
        box2d = None
    return ProjectedInstance(frame=frame.index, instance=i, pixels=pix, vis=vis, box2d=box2d)
