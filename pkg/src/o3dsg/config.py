"""Pipeline configuration: one JSON file, flag overrides win.

The config is a nested dict validated against a known schema; unknown keys
are rejected so typos fail loudly. Relative paths resolve against the config
file's directory, which keeps generated fixtures relocatable. Every error
names the offending field.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .net.model import ModelConfig
from .net.train import TrainConfig
from .selection import SelectionParams

DEFAULTS = {
    "paths": {
        "train_manifests": [],
        "eval_manifests": [],
        "object_table": None,
        "predicate_table": None,
        "lookup_table": None,
        "attribute_table": None,
        "frequencies": None,
        "workdir": "work",
    },
    "selection": {"t_occ": 0.10, "t_vis": 0.3, "t_box": 0.2, "k_frames": 5},
    "features": {"scales": [1.0, 1.5, 2.0]},
    "prune_distance": None,
    "model": {
        "point_hidden": [32],
        "point_feat": 32,
        "gnn_layers": 5,
        "gnn_hidden": 128,
        "node_head_layers": 5,
        "head_hidden": 128,
        "d_obj": 16,
        "d_rel": 16,
        "edge_tokens": 4,
        "token_dim": 16,
        "pos_tag_dim": 8,
        "edge_head_blocks": 5,
        "node_budget": 256,
        "edge_budget": 512,
        "seed": 0,
    },
    "train": {
        "epochs": 200,
        "lr": 5e-4,
        "lr_min_ratio": 0.01,
        "cycle_epochs": 50,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "weight_decay": 1e-4,
        "checkpoint_every": 0,
    },
    "infer": {
        "top_k": None,
        "decoder": "nearest",
        "endpoint": None,
        "timeout": 30.0,
        "max_in_flight": 4,
        "fallback": False,
        "use_gt_labels": False,
    },
    "eval": {
        "object_ks": [1, 3, 5, 10],
        "predicate_ks": [1, 3, 5],
        "triplet_ks": [1, 50, 100],
    },
    "repl": {"manifest": None},
    "fixture": {
        "out_dir": "fixture",
        "seed": 7,
        "noise": 0.01,
        "n_train": 4,
        "n_eval": 4,
        "image_size": 64,
    },
}


class ConfigError(ValueError):
    def __init__(self, field: str, detail: str):
        super().__init__(f"config: bad {field}: {detail}")
        self.field = field
        self.detail = detail


def _merge(defaults: dict, user, prefix: str):
    if not isinstance(user, dict):
        raise ConfigError(prefix or "<root>", f"expected an object, got {type(user).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in defaults:
            raise ConfigError(path, "unknown key")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, path)
        else:
            out[key] = value
    return out


def _set_override(data: dict, dotted: str, raw: str):
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    keys = dotted.split(".")
    node = data
    for i, key in enumerate(keys[:-1]):
        if key not in node or not isinstance(node[key], dict):
            raise ConfigError(".".join(keys[: i + 1]), "unknown key")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(dotted, "cannot override a whole section")
    node[keys[-1]] = value


@dataclass
class PipelineConfig:
    data: dict
    base_dir: Path

    @classmethod
    def load(cls, path, overrides=()) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<json>", f"{path}: {exc}") from exc
        data = _merge(DEFAULTS, user, "")
        for item in overrides:
            if "=" not in item:
                raise ConfigError("--set", f"expected key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            _set_override(data, dotted, raw)
        cfg = cls(data=data, base_dir=path.parent.resolve())
        cfg.validate()
        return cfg

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    # -- typed accessors -----------------------------------------------------

    def selection_params(self) -> SelectionParams:
        s = self.data["selection"]
        return SelectionParams(t_vis=s["t_vis"], t_box=s["t_box"], t_occ=s["t_occ"], k=s["k_frames"])

    def scales(self) -> tuple:
        return tuple(self.data["features"]["scales"])

    def model_config(self) -> ModelConfig:
        m = dict(self.data["model"])
        m["point_hidden"] = tuple(m["point_hidden"])
        return ModelConfig(**m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.data["train"])

    def workdir(self) -> Path:
        return self.resolve(self.data["paths"]["workdir"])

    def manifests(self, which: str) -> list:
        return [self.resolve(p) for p in self.data["paths"][f"{which}_manifests"]]

    def table_path(self, name: str):
        p = self.data["paths"][f"{name}_table"]
        return self.resolve(p) if p else None

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        s = self.data["selection"]
        for name in ("t_occ", "t_vis", "t_box"):
            v = s[name]
            if not isinstance(v, (int, float)):
                raise ConfigError(f"selection.{name}", "must be a number")
        try:
            self.selection_params().validate()
        except ValueError as exc:
            raise ConfigError("selection", str(exc)) from exc

        scales = self.data["features"]["scales"]
        if not scales or any(not isinstance(x, (int, float)) or x <= 0 for x in scales):
            raise ConfigError("features.scales", "must be a non-empty list of positive numbers")

        pd = self.data["prune_distance"]
        if pd is not None and (not isinstance(pd, (int, float)) or pd <= 0):
            raise ConfigError("prune_distance", "must be null or a positive number")

        try:
            self.model_config()
        except TypeError as exc:
            raise ConfigError("model", str(exc)) from exc
        m = self.data["model"]
        for name in ("point_feat", "gnn_hidden", "head_hidden", "d_obj", "d_rel",
                     "edge_tokens", "token_dim", "pos_tag_dim", "node_budget", "edge_budget"):
            if not isinstance(m[name], int) or m[name] < 1:
                raise ConfigError(f"model.{name}", "must be a positive integer")
        for name in ("gnn_layers", "edge_head_blocks"):
            if not isinstance(m[name], int) or m[name] < 0:
                raise ConfigError(f"model.{name}", "must be a non-negative integer")
        if not isinstance(m["node_head_layers"], int) or m["node_head_layers"] < 1:
            raise ConfigError("model.node_head_layers", "must be a positive integer")

        t = self.data["train"]
        if not isinstance(t["epochs"], int) or t["epochs"] < 0:
            raise ConfigError("train.epochs", "must be a non-negative integer")
        if t["lr"] < 0:
            raise ConfigError("train.lr", "must be >= 0")
        if not isinstance(t["cycle_epochs"], int) or t["cycle_epochs"] < 1:
            raise ConfigError("train.cycle_epochs", "must be a positive integer")

        inf = self.data["infer"]
        if inf["decoder"] not in ("nearest", "external"):
            raise ConfigError("infer.decoder", f"unknown decoder {inf['decoder']!r}")
        if inf["decoder"] == "external" and not inf["endpoint"]:
            raise ConfigError("infer.endpoint", "required when decoder is 'external'")
        if inf["top_k"] is not None and (not isinstance(inf["top_k"], int) or inf["top_k"] < 1):
            raise ConfigError("infer.top_k", "must be null or a positive integer")
        if inf["timeout"] <= 0:
            raise ConfigError("infer.timeout", "must be positive")
        if not isinstance(inf["max_in_flight"], int) or inf["max_in_flight"] < 1:
            raise ConfigError("infer.max_in_flight", "must be a positive integer")

        for section in ("object_ks", "predicate_ks", "triplet_ks"):
            ks = self.data["eval"][section]
            if not ks or any(not isinstance(k, int) or k < 1 for k in ks):
                raise ConfigError(f"eval.{section}", "must be a non-empty list of positive integers")

        f = self.data["fixture"]
        if f["noise"] < 0:
            raise ConfigError("fixture.noise", "must be >= 0")
        for name in ("n_train", "n_eval", "image_size", "seed"):
            if not isinstance(f[name], int) or f[name] < (0 if name == "seed" else 1):
                raise ConfigError(f"fixture.{name}", "must be a positive integer")
