"""Deterministic distillation training loop.

One optimizer step per scene, scenes visited in sorted id order, adaptive
moment estimation with decoupled weight decay, and a cyclic cosine-annealing
learning rate. Everything that touches parameters is float32 with fixed
iteration order, so a rerun with the same seed and inputs yields bit-identical
checkpoints, and resuming from a checkpoint continues the exact trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import formats
from .model import ModelConfig, SceneGraphModel, _param_spec


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 5e-4
    lr_min_ratio: float = 0.01
    cycle_epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    checkpoint_every: int = 0  # additionally checkpoint every N epochs; 0 = final only

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls(**json.loads(text))


@dataclass
class TrainState:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, model_cfg: ModelConfig, train_cfg: TrainConfig) -> "TrainState":
        model = SceneGraphModel(model_cfg)
        zeros = lambda: {k: np.zeros_like(p) for k, p in model.params.items()}
        return cls(model_cfg, train_cfg, model.params, zeros(), zeros())

    def save(self, path) -> None:
        cfg = json.dumps(
            {"model": json.loads(self.model_cfg.to_json()), "train": json.loads(self.train_cfg.to_json())},
            sort_keys=True,
        )
        opt = {}
        for k in self.params:
            opt[k + ".m"] = self.m[k]
            opt[k + ".v"] = self.v[k]
        formats.write_checkpoint(path, cfg, self.params, opt, {"step": self.step, "epoch": self.epoch})


def load_checkpoint(path) -> TrainState:
    cfg_json, params, opt, counters = formats.read_checkpoint(path)
    blob = json.loads(cfg_json)
    model_cfg = ModelConfig.from_json(json.dumps(blob["model"]))
    train_cfg = TrainConfig.from_json(json.dumps(blob["train"]))
    expected = {name: shape for name, shape, _ in _param_spec(model_cfg)}
    got = {k: v.shape for k, v in params.items()}
    if got != expected:
        raise formats.ParseError(path, "params", "parameter names/shapes do not match the config echo")
    m = {k: opt[k + ".m"] for k in params}
    v = {k: opt[k + ".v"] for k in params}
    if len(opt) != 2 * len(params):
        raise formats.ParseError(path, "opt_state", "unexpected optimizer tensors")
    return TrainState(model_cfg, train_cfg, params, m, v, int(counters["step"]), int(counters["epoch"]))


def lr_at(step: int, cfg: TrainConfig, steps_per_cycle: int) -> float:
    lo = cfg.lr * cfg.lr_min_ratio
    pos = step % steps_per_cycle
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * pos / steps_per_cycle))


def _adamw_step(state: TrainState, grads: dict, lr: float) -> None:
    cfg = state.train_cfg
    t = state.step + 1
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    one = np.float32(1.0)
    c1 = np.float32(1.0 / (1.0 - cfg.beta1 ** t))
    c2 = np.float32(1.0 / (1.0 - cfg.beta2 ** t))
    lr32, wd, eps = np.float32(lr), np.float32(cfg.weight_decay), np.float32(cfg.eps)
    for name in sorted(state.params):
        g = grads[name]
        m, v, p = state.m[name], state.v[name], state.params[name]
        m *= b1
        m += (one - b1) * g
        v *= b2
        v += (one - b2) * g * g
        p -= lr32 * ((m * c1) / (np.sqrt(v * c2) + eps) + wd * p)
    state.step += 1


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    scenes,
    out_dir=None,
    resume=None,
    log=None,
):
    """Run the distillation loop over (PreparedScene, FusedTargets) pairs.

    Returns (final TrainState, per-epoch mean loss history for the epochs run
    by this call).
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    scenes = sorted(scenes, key=lambda st: st[0].scene_id)
    if resume is not None:
        state = load_checkpoint(resume)
        # Extending the epoch horizon is the point of resuming; everything
        # that shapes the optimization trajectory itself must match exactly.
        saved = dataclasses.replace(state.train_cfg, epochs=train_cfg.epochs)
        if state.model_cfg != model_cfg or saved != train_cfg:
            raise ValueError("resume checkpoint was written with a different configuration")
        state = dataclasses.replace(state, train_cfg=train_cfg)
    else:
        state = TrainState.fresh(model_cfg, train_cfg)
    model = SceneGraphModel(model_cfg, params=state.params)
    steps_per_cycle = max(1, train_cfg.cycle_epochs * len(scenes))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    history = []
    while state.epoch < train_cfg.epochs:
        total = 0.0
        for scene, targets in scenes:
            loss, _, grads = model.loss_and_grads(scene, targets)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {state.epoch} scene {scene.scene_id}")
            _adamw_step(state, grads, lr_at(state.step, train_cfg, steps_per_cycle))
            total += loss
        state.epoch += 1
        epoch_loss = total / len(scenes)
        history.append(epoch_loss)
        if log is not None:
            log(state.epoch, epoch_loss)
        if out_dir is not None and train_cfg.checkpoint_every and state.epoch % train_cfg.checkpoint_every == 0:
            state.save(out_dir / f"epoch_{state.epoch:04d}.o3ck")
    if out_dir is not None:
        state.save(out_dir / "final.o3ck")
    return state, history
