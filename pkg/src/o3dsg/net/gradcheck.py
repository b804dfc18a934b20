"""Finite-difference verification of the analytic gradients.

The loss is piecewise smooth: ReLU kinks and max-pool winner switches carve
parameter space into smooth cells. A central difference straddling a cell
boundary does not estimate the derivative of either branch, so each probe
records a branch signature (which side of every kink the evaluation took) at
p+h and p-h and is discarded and re-drawn if the two disagree. This verifies
finite differences where they are mathematically valid instead of silently
comparing garbage; the analytic gradient itself is never adjusted.
"""

from __future__ import annotations

import numpy as np

from ..features import FusedTargets
from .model import ModelConfig, PreparedScene, SceneGraphModel, SignatureRecorder


def random_case(cfg: ModelConfig, seed: int, n_nodes: int = 3, points_per_set: tuple = (4, 9)):
    """A small synthetic scene (fully connected) with random present targets."""
    rng = np.random.default_rng(seed)
    node_ids = tuple(range(1, n_nodes + 1))
    lo, hi = points_per_set

    node_chunks = [rng.normal(size=(int(rng.integers(lo, hi)), 3)).astype(np.float32) for _ in node_ids]
    pairs = tuple((i, j) for i in node_ids for j in node_ids if i != j)
    edge_chunks = []
    for _ in pairs:
        n = int(rng.integers(lo, hi))
        xyz = rng.normal(size=(n, 3))
        mask = rng.integers(0, 3, size=(n, 1))
        edge_chunks.append(np.concatenate([xyz, mask], axis=1).astype(np.float32))

    def pack(chunks, width):
        offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
        for k, c in enumerate(chunks):
            offsets[k + 1] = offsets[k] + c.shape[0]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, width), np.float32), offsets

    node_points, node_offsets = pack(node_chunks, 3)
    edge_points, edge_offsets = pack(edge_chunks, 4)
    row = {i: r for r, i in enumerate(node_ids)}
    scene = PreparedScene(
        scene_id=f"gradcheck-{seed}",
        node_ids=node_ids,
        node_points=node_points,
        node_offsets=node_offsets,
        edge_pairs=pairs,
        edge_points=edge_points,
        edge_offsets=edge_offsets,
        subj=np.array([row[i] for (i, _) in pairs], dtype=np.int64),
        obj=np.array([row[j] for (_, j) in pairs], dtype=np.int64),
    )
    targets = FusedTargets(
        d_obj=cfg.d_obj,
        d_rel=cfg.d_rel,
        node_targets={i: rng.normal(size=cfg.d_obj).astype(np.float32) for i in node_ids},
        edge_targets={p: rng.normal(size=cfg.d_rel).astype(np.float32) for p in pairs},
    )
    return scene, targets


def _loss_with_signature(model, scene, targets):
    rec = SignatureRecorder()
    loss = model.loss_only(scene, targets, rec=rec)
    return loss, rec.digest()


def gradient_check(
    model: SceneGraphModel,
    scene: PreparedScene,
    targets: FusedTargets,
    samples_per_group: int = 4,
    h: float = 1e-4,
    rng_seed: int = 0,
    rel_floor: float = 1e-3,
):
    """Max relative error between analytic and central-difference gradients.

    Samples ``samples_per_group`` elements from every parameter tensor. The
    relative error denominator is floored at ``rel_floor`` so finite-difference
    roundoff (~1e-9 absolute) cannot dominate near-zero gradients; any real
    backward-pass bug still shows up at O(1).

    Returns (max relative error over all groups, per-group dict).
    """
    model64 = model.astype(np.float64)
    _, _, grads = model64.loss_and_grads(scene, targets)
    rng = np.random.default_rng(rng_seed)
    report = {}
    worst = 0.0
    for name in sorted(model64.params):
        flat = model64.params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        order = rng.permutation(flat.size)
        group_max = 0.0
        taken = 0
        for idx in order:
            if taken >= min(samples_per_group, flat.size):
                break
            orig = flat[idx]
            flat[idx] = orig + h
            lp, sig_p = _loss_with_signature(model64, scene, targets)
            flat[idx] = orig - h
            lm, sig_m = _loss_with_signature(model64, scene, targets)
            flat[idx] = orig
            if sig_p != sig_m:
                continue  # probe straddles a kink; redraw
            taken += 1
            fd = (lp - lm) / (2.0 * h)
            a = float(gflat[idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            group_max = max(group_max, rel)
        report[name] = group_max
        worst = max(worst, group_max)
    return worst, report
