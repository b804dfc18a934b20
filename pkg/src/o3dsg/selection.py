"""Top-k frame selection for objects and object pairs.

A frame passes for an object when its visibility ratio or its normalized 2D
box area clears a threshold (large objects like floors may fill the image at
low visibility). Pairs require both endpoints to pass in the same frame and
rank by the smaller of the two visibilities, so neither object is marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .projection import DEFAULT_T_OCC, ProjectedInstance, project_instance


@dataclass(frozen=True)
class SelectionParams:
    t_vis: float = 0.3
    t_box: float = 0.2  # threshold on A(box) / (W*H)
    t_occ: float = DEFAULT_T_OCC
    k: int = 5

    def validate(self) -> None:
        for name in ("t_vis", "t_box"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.t_occ <= 0:
            raise ValueError(f"t_occ must be positive, got {self.t_occ}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class FrameCandidate:
    frame: int
    vis: float
    area_fraction: float
    passes: bool


@dataclass
class SelectionResult:
    objects: dict = field(default_factory=dict)  # id -> [frame, ...] best first
    pairs: dict = field(default_factory=dict)  # (i, j) -> [frame, ...] best first

    def to_json_dict(self) -> dict:
        return {
            "objects": {str(i): list(fr) for i, fr in sorted(self.objects.items())},
            "pairs": {f"{i},{j}": list(fr) for (i, j), fr in sorted(self.pairs.items())},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SelectionResult":
        objects = {int(i): list(fr) for i, fr in d["objects"].items()}
        pairs = {}
        for key, fr in d["pairs"].items():
            i, j = key.split(",")
            pairs[(int(i), int(j))] = list(fr)
        return cls(objects=objects, pairs=pairs)


def frame_candidate(proj: ProjectedInstance, width: int, height: int, params: SelectionParams) -> FrameCandidate:
    area = proj.area_fraction(width, height)
    return FrameCandidate(
        frame=proj.frame,
        vis=proj.vis,
        area_fraction=area,
        passes=(proj.vis > params.t_vis) or (area > params.t_box),
    )


def _project_all(frames, cloud, inst, i, params):
    return [project_instance(f, cloud, inst, i, t_occ=params.t_occ) for f in frames]


def select_object_frames(frames, cloud, inst, i: int, params: SelectionParams) -> list:
    """Top-k passing frames for one object, best visibility first.

    Ties break toward the lower frame index; an empty list (nothing passes)
    is a valid outcome, not an error.
    """
    params.validate()
    inst.require(i)
    cands = [frame_candidate(p, f.width, f.height, params) for p, f in zip(_project_all(frames, cloud, inst, i, params), frames)]
    passing = [c for c in cands if c.passes]
    passing.sort(key=lambda c: (-c.vis, c.frame))
    return [c.frame for c in passing[: params.k]]


def select_pair_frames(frames, cloud, inst, i: int, j: int, params: SelectionParams) -> list:
    """Top-k frames where both objects individually pass, ranked by min visibility."""
    params.validate()
    if i == j:
        raise ValueError(f"pair requires two distinct instances, got {i} twice")
    inst.require(i)
    inst.require(j)
    proj_i = _project_all(frames, cloud, inst, i, params)
    proj_j = _project_all(frames, cloud, inst, j, params)
    scored = []
    for f, pi, pj in zip(frames, proj_i, proj_j):
        ci = frame_candidate(pi, f.width, f.height, params)
        cj = frame_candidate(pj, f.width, f.height, params)
        if ci.passes and cj.passes:
            scored.append((min(ci.vis, cj.vis), f.index))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [fr for _, fr in scored[: params.k]]


def select_all(frames, cloud, inst, skeleton, params: SelectionParams) -> SelectionResult:
    """SelectionResult over every node and every edge of the skeleton.

    Projections are computed once per (instance, frame) and reused for pair
    scoring; the outcome matches the per-object/per-pair entry points exactly.
    """
    params.validate()
    cands = {}
    for i in skeleton.nodes:
        per_frame = _project_all(frames, cloud, inst, i, params)
        cands[i] = [frame_candidate(p, f.width, f.height, params) for p, f in zip(per_frame, frames)]

    result = SelectionResult()
    for i in skeleton.nodes:
        passing = [c for c in cands[i] if c.passes]
        passing.sort(key=lambda c: (-c.vis, c.frame))
        result.objects[i] = [c.frame for c in passing[: params.k]]
    for (i, j) in skeleton.edges:
        scored = [
            (min(ci.vis, cj.vis), ci.frame)
            for ci, cj in zip(cands[i], cands[j])
            if ci.passes and cj.passes
        ]
        scored.sort(key=lambda t: (-t[0], t[1]))
        result.pairs[(i, j)] = [fr for _, fr in scored[: params.k]]
    return result
