"""The trainable 3D side: point-set encoders, triplet message passing, heads.

Layout of the forward pass over one scene:

  node point sets --+-> shared per-point MLP -> segment max-pool -> phi_n (V,F)
  edge point sets --+-> shared per-point MLP -> segment max-pool -> phi_e (E,F)
  K rounds of triplet message passing (mean aggregation over incident edges)
  node head: MLP with ReLU + per-layer normalization        -> (V, D_obj)
  edge head: token expansion + positional tag + attention   -> (E, D_rel)

Every edge is expanded into its own short token sequence before the
self-attention blocks, so the head is a per-edge map and the full forward
pass stays equivariant under node relabeling. Parameters live in a flat
name -> array dict; gradients come back under the same names.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import core
from ..scene import build_pair_set


@dataclass(frozen=True)
class ModelConfig:
    point_hidden: tuple = (32,)
    point_feat: int = 32
    gnn_layers: int = 5
    gnn_hidden: int = 128
    node_head_layers: int = 5
    head_hidden: int = 128
    d_obj: int = 16
    d_rel: int = 16
    edge_tokens: int = 4
    token_dim: int = 16
    pos_tag_dim: int = 8
    edge_head_blocks: int = 5
    node_budget: int = 256
    edge_budget: int = 512
    seed: int = 0

    @property
    def token_width(self) -> int:
        return self.token_dim + self.pos_tag_dim

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["point_hidden"] = list(self.point_hidden)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["point_hidden"] = tuple(d["point_hidden"])
        return cls(**d)


@dataclass
class PreparedScene:
    """Normalized, budgeted point sets plus index plumbing for one scene."""

    scene_id: str
    node_ids: tuple  # sorted instance ids, row order of all node tensors
    node_points: np.ndarray  # (sum Ni, 3) f32
    node_offsets: np.ndarray  # (V+1,) int64
    edge_pairs: tuple  # (i, j) instance-id pairs, row order of edge tensors
    edge_points: np.ndarray  # (sum Mi, 4) f32, mask channel last
    edge_offsets: np.ndarray  # (E+1,) int64
    subj: np.ndarray  # (E,) node-row index of each edge's subject
    obj: np.ndarray  # (E,) node-row index of each edge's object

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edge_pairs)


def _subsample_seed(scene_id: str, key: str) -> int:
    digest = hashlib.sha256(f"{scene_id}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _fps_indices(points: np.ndarray, budget: int, seed: int) -> np.ndarray:
    """Deterministic farthest-point subsampling; identity when under budget."""
    n = points.shape[0]
    if n <= budget:
        return np.arange(n)
    pts = points.astype(np.float64)
    start = seed % n
    chosen = np.empty(budget, dtype=np.int64)
    chosen[0] = start
    dist = np.sum(np.square(pts - pts[start]), axis=1)
    for t in range(1, budget):
        nxt = int(np.argmax(dist))
        chosen[t] = nxt
        dist = np.minimum(dist, np.sum(np.square(pts - pts[nxt]), axis=1))
    return np.sort(chosen)


def _normalize(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    centered = points.astype(np.float64) - center
    scale = float(np.sqrt(np.max(np.sum(np.square(centered), axis=1), initial=0.0)))
    if scale == 0.0:
        scale = 1.0
    return (centered / scale).astype(np.float32)


def prepare_scene(cloud, inst, skeleton, cfg: ModelConfig, scene_id: str) -> PreparedScene:
    node_ids = tuple(skeleton.nodes)
    row_of = {i: r for r, i in enumerate(node_ids)}

    node_chunks = []
    for i in node_ids:
        pts = cloud.points[inst.point_index[i]]
        sel = _fps_indices(pts, cfg.node_budget, _subsample_seed(scene_id, str(i)))
        pts = pts[sel]
        centroid = pts.astype(np.float64).mean(axis=0)
        node_chunks.append(_normalize(pts, centroid))

    edge_chunks = []
    for (i, j) in skeleton.edges:
        pair = build_pair_set(cloud, inst, i, j)
        sel = _fps_indices(pair.points, cfg.edge_budget, _subsample_seed(scene_id, f"{i},{j}"))
        lo_i, hi_i = inst.aabb[i]
        lo_j, hi_j = inst.aabb[j]
        center = (np.minimum(lo_i, lo_j) + np.maximum(hi_i, hi_j)) / 2.0
        xyz = _normalize(pair.points[sel], center)
        mask = pair.mask_channel[sel].astype(np.float32)[:, None]
        edge_chunks.append(np.concatenate([xyz, mask], axis=1))

    def pack(chunks, width):
        offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
        for k, c in enumerate(chunks):
            offsets[k + 1] = offsets[k] + c.shape[0]
        if chunks:
            data = np.concatenate(chunks, axis=0)
        else:
            data = np.zeros((0, width), dtype=np.float32)
        return data, offsets

    node_points, node_offsets = pack(node_chunks, 3)
    edge_points, edge_offsets = pack(edge_chunks, 4)
    subj = np.array([row_of[i] for (i, _) in skeleton.edges], dtype=np.int64)
    obj = np.array([row_of[j] for (_, j) in skeleton.edges], dtype=np.int64)
    return PreparedScene(
        scene_id=scene_id,
        node_ids=node_ids,
        node_points=node_points,
        node_offsets=node_offsets,
        edge_pairs=tuple(skeleton.edges),
        edge_points=edge_points,
        edge_offsets=edge_offsets,
        subj=subj,
        obj=obj,
    )


class KinkRecorder:
    """Tracks the distance of a forward pass from ReLU kinks and max-pool ties."""

    def __init__(self):
        self.margin = np.inf

    def relu(self, pre: np.ndarray) -> None:
        if pre.size:
            self.margin = min(self.margin, float(np.min(np.abs(pre))))

    def maxpool(self, x: np.ndarray, offsets: np.ndarray, idx: np.ndarray) -> None:
        self.margin = min(self.margin, core.segment_maxpool_gaps(x, offsets))


class SignatureRecorder:
    """Hashes which side of every kink a forward pass took.

    Two evaluations with equal digests lie on the same smooth branch of the
    loss, so a finite difference between them is a valid derivative estimate.
    """

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def relu(self, pre: np.ndarray) -> None:
        if pre.size:
            self._h.update(np.packbits(pre > 0).tobytes())

    def maxpool(self, x: np.ndarray, offsets: np.ndarray, idx: np.ndarray) -> None:
        self._h.update(idx.tobytes())

    def digest(self) -> bytes:
        return self._h.digest()


def _param_spec(cfg: ModelConfig):
    """Ordered (name, shape, kind) listing; creation order fixes the init RNG stream."""
    spec = []

    def mlp(prefix, widths):
        for l in range(len(widths) - 1):
            spec.append((f"{prefix}.{l}.w", (widths[l], widths[l + 1]), "w"))
            spec.append((f"{prefix}.{l}.b", (widths[l + 1],), "b"))

    mlp("enc_node", [3, *cfg.point_hidden, cfg.point_feat])
    mlp("enc_edge", [4, *cfg.point_hidden, cfg.point_feat])

    f, h = cfg.point_feat, cfg.gnn_hidden
    for k in range(cfg.gnn_layers):
        spec.append((f"gnn.{k}.msg.w", (3 * f, 3 * h), "w"))
        spec.append((f"gnn.{k}.msg.b", (3 * h,), "b"))
        spec.append((f"gnn.{k}.edge.w", (h, f), "w"))
        spec.append((f"gnn.{k}.edge.b", (f,), "b"))
        spec.append((f"gnn.{k}.node.w", (h, f), "w"))
        spec.append((f"gnn.{k}.node.b", (f,), "b"))

    widths = [f] + [cfg.head_hidden] * (cfg.node_head_layers - 1) + [cfg.d_obj]
    for l in range(cfg.node_head_layers):
        spec.append((f"node_head.{l}.w", (widths[l], widths[l + 1]), "w"))
        spec.append((f"node_head.{l}.b", (widths[l + 1],), "b"))
        if l < cfg.node_head_layers - 1:
            spec.append((f"node_head.{l}.ln_g", (widths[l + 1],), "ln_g"))
            spec.append((f"node_head.{l}.ln_b", (widths[l + 1],), "ln_b"))

    a = cfg.token_width
    spec.append(("edge_head.in.w", (f, cfg.edge_tokens * cfg.token_dim), "w"))
    spec.append(("edge_head.in.b", (cfg.edge_tokens * cfg.token_dim,), "b"))
    for b in range(cfg.edge_head_blocks):
        p = f"edge_head.{b}"
        for nm in ("wq", "wk", "wv", "wo"):
            spec.append((f"{p}.{nm}", (a, a), "w"))
        for nm in ("bq", "bk", "bv", "bo"):
            spec.append((f"{p}.{nm}", (a,), "b"))
        spec.append((f"{p}.ln1_g", (a,), "ln_g"))
        spec.append((f"{p}.ln1_b", (a,), "ln_b"))
        spec.append((f"{p}.ffn1.w", (a, 2 * a), "w"))
        spec.append((f"{p}.ffn1.b", (2 * a,), "b"))
        spec.append((f"{p}.ffn2.w", (2 * a, a), "w"))
        spec.append((f"{p}.ffn2.b", (a,), "b"))
        spec.append((f"{p}.ln2_g", (a,), "ln_g"))
        spec.append((f"{p}.ln2_b", (a,), "ln_b"))
    spec.append(("edge_head.out.w", (a, cfg.d_rel), "w"))
    spec.append(("edge_head.out.b", (cfg.d_rel,), "b"))
    return spec


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape, kind in _param_spec(cfg):
        if kind == "w":
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        elif kind == "ln_g":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


class SceneGraphModel:
    def __init__(self, cfg: ModelConfig, params: dict | None = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = params if params is not None else init_params(cfg, dtype)
        self.pos_tag = core.sinusoidal_tag(cfg.edge_tokens, cfg.pos_tag_dim)

    def astype(self, dtype) -> "SceneGraphModel":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return SceneGraphModel(self.cfg, params=params, dtype=dtype)

    # -- encoders ----------------------------------------------------------

    def _encode(self, params, prefix, x, offsets, n_layers, rec):
        lin_caches, pre_caches = [], []
        for l in range(n_layers):
            x, c = core.linear(x, params[f"{prefix}.{l}.w"], params[f"{prefix}.{l}.b"])
            lin_caches.append(c)
            if rec is not None:
                rec.relu(x)
            pre_caches.append(x)
            x = np.maximum(x, 0)
        pooled, mcache = core.segment_maxpool(x, offsets)
        if rec is not None:
            rec.maxpool(x, offsets, mcache[0])
        return pooled, (lin_caches, pre_caches, mcache)

    def _encode_bwd(self, prefix, dpooled, cache, grads, n_layers):
        lin_caches, pre_caches, mcache = cache
        dx = core.segment_maxpool_bwd(dpooled, mcache)
        for l in reversed(range(n_layers)):
            dx = core.relu_bwd(dx, pre_caches[l])
            dx, dw, db = core.linear_bwd(dx, lin_caches[l])
            grads[f"{prefix}.{l}.w"] += dw
            grads[f"{prefix}.{l}.b"] += db

    # -- triplet message passing --------------------------------------------

    def _gnn(self, params, n, e, subj, obj, rec):
        h_dim = self.cfg.gnn_hidden
        caches = []
        groups = np.concatenate([subj, obj])
        for k in range(self.cfg.gnn_layers):
            h = np.concatenate([n[subj], e, n[obj]], axis=1)
            m_lin, c_msg = core.linear(h, params[f"gnn.{k}.msg.w"], params[f"gnn.{k}.msg.b"])
            if rec is not None:
                rec.relu(m_lin)
            m = np.maximum(m_lin, 0)
            alpha, inner, gamma = m[:, :h_dim], m[:, h_dim:2 * h_dim], m[:, 2 * h_dim:]
            e_lin, c_edge = core.linear(inner, params[f"gnn.{k}.edge.w"], params[f"gnn.{k}.edge.b"])
            if rec is not None:
                rec.relu(e_lin)
            e_new = np.maximum(e_lin, 0)
            agg, c_scatter = core.scatter_mean(np.concatenate([alpha, gamma], axis=0), groups, n.shape[0])
            n_lin, c_node = core.linear(agg, params[f"gnn.{k}.node.w"], params[f"gnn.{k}.node.b"])
            if rec is not None:
                rec.relu(n_lin)
            n_new = np.maximum(n_lin, 0)
            caches.append((c_msg, m_lin, c_edge, e_lin, c_scatter, c_node, n_lin, n.shape))
            n, e = n_new, e_new
        return n, e, (caches, subj, obj)

    def _gnn_bwd(self, dn, de, cache, grads):
        caches, subj, obj = cache
        h_dim = self.cfg.gnn_hidden
        f = self.cfg.point_feat
        n_edges = len(subj)
        for k in reversed(range(self.cfg.gnn_layers)):
            c_msg, m_pre, c_edge, e_pre, c_scatter, c_node, n_pre, n_shape = caches[k]
            dn_lin = core.relu_bwd(dn, n_pre)
            dagg, dw, db = core.linear_bwd(dn_lin, c_node)
            grads[f"gnn.{k}.node.w"] += dw
            grads[f"gnn.{k}.node.b"] += db
            dvals = core.scatter_mean_bwd(dagg, c_scatter)
            de_lin = core.relu_bwd(de, e_pre)
            dinner, dw, db = core.linear_bwd(de_lin, c_edge)
            grads[f"gnn.{k}.edge.w"] += dw
            grads[f"gnn.{k}.edge.b"] += db
            dm = np.concatenate([dvals[:n_edges], dinner, dvals[n_edges:]], axis=1)
            dm_lin = core.relu_bwd(dm, m_pre)
            dh, dw, db = core.linear_bwd(dm_lin, c_msg)
            grads[f"gnn.{k}.msg.w"] += dw
            grads[f"gnn.{k}.msg.b"] += db
            dn = np.zeros(n_shape, dtype=dh.dtype)
            np.add.at(dn, subj, dh[:, :f])
            np.add.at(dn, obj, dh[:, 2 * f:])
            de = dh[:, f:2 * f]
        return dn, de

    # -- heads ---------------------------------------------------------------

    def _node_head(self, params, x, rec):
        caches = []
        n_hidden = self.cfg.node_head_layers - 1
        for l in range(n_hidden):
            x, c_lin = core.linear(x, params[f"node_head.{l}.w"], params[f"node_head.{l}.b"])
            if rec is not None:
                rec.relu(x)
            pre = x
            x = np.maximum(x, 0)
            x, c_ln = core.layernorm(x, params[f"node_head.{l}.ln_g"], params[f"node_head.{l}.ln_b"])
            caches.append((c_lin, pre, c_ln))
        out, c_out = core.linear(x, params[f"node_head.{n_hidden}.w"], params[f"node_head.{n_hidden}.b"])
        return out, (caches, c_out)

    def _node_head_bwd(self, dout, cache, grads):
        caches, c_out = cache
        n_hidden = self.cfg.node_head_layers - 1
        dx, dw, db = core.linear_bwd(dout, c_out)
        grads[f"node_head.{n_hidden}.w"] += dw
        grads[f"node_head.{n_hidden}.b"] += db
        for l in reversed(range(n_hidden)):
            c_lin, pre, c_ln = caches[l]
            dx, dg, dbn = core.layernorm_bwd(dx, c_ln)
            grads[f"node_head.{l}.ln_g"] += dg
            grads[f"node_head.{l}.ln_b"] += dbn
            dx = core.relu_bwd(dx, pre)
            dx, dw, db = core.linear_bwd(dx, c_lin)
            grads[f"node_head.{l}.w"] += dw
            grads[f"node_head.{l}.b"] += db
        return dx

    def _edge_head(self, params, e, rec):
        cfg = self.cfg
        n_edges = e.shape[0]
        t_lin, c_in = core.linear(e, params["edge_head.in.w"], params["edge_head.in.b"])
        tok = t_lin.reshape(n_edges, cfg.edge_tokens, cfg.token_dim)
        tag = np.broadcast_to(self.pos_tag.astype(e.dtype), (n_edges, cfg.edge_tokens, cfg.pos_tag_dim))
        x = np.concatenate([tok, tag], axis=2)
        blocks = []
        for b in range(cfg.edge_head_blocks):
            p = f"edge_head.{b}"
            q, c_q = core.linear(x, params[f"{p}.wq"], params[f"{p}.bq"])
            kk, c_k = core.linear(x, params[f"{p}.wk"], params[f"{p}.bk"])
            v, c_v = core.linear(x, params[f"{p}.wv"], params[f"{p}.bv"])
            ao, c_attn = core.attention(q, kk, v)
            o, c_o = core.linear(ao, params[f"{p}.wo"], params[f"{p}.bo"])
            x, c_ln1 = core.layernorm(x + o, params[f"{p}.ln1_g"], params[f"{p}.ln1_b"])
            f1, c_f1 = core.linear(x, params[f"{p}.ffn1.w"], params[f"{p}.ffn1.b"])
            if rec is not None:
                rec.relu(f1)
            f1r = np.maximum(f1, 0)
            f2, c_f2 = core.linear(f1r, params[f"{p}.ffn2.w"], params[f"{p}.ffn2.b"])
            x, c_ln2 = core.layernorm(x + f2, params[f"{p}.ln2_g"], params[f"{p}.ln2_b"])
            blocks.append((c_q, c_k, c_v, c_attn, c_o, c_ln1, c_f1, f1, c_f2, c_ln2))
        pooled, c_mean = core.mean_rows(x)
        out, c_out = core.linear(pooled, params["edge_head.out.w"], params["edge_head.out.b"])
        return out, (c_in, blocks, c_mean, c_out)

    def _edge_head_bwd(self, dout, cache, grads):
        cfg = self.cfg
        c_in, blocks, c_mean, c_out = cache
        dpooled, dw, db = core.linear_bwd(dout, c_out)
        grads["edge_head.out.w"] += dw
        grads["edge_head.out.b"] += db
        dx = core.mean_rows_bwd(dpooled, c_mean)
        for b in reversed(range(cfg.edge_head_blocks)):
            p = f"edge_head.{b}"
            c_q, c_k, c_v, c_attn, c_o, c_ln1, c_f1, f1_pre, c_f2, c_ln2 = blocks[b]
            dr2, dg, dbn = core.layernorm_bwd(dx, c_ln2)
            grads[f"{p}.ln2_g"] += dg
            grads[f"{p}.ln2_b"] += dbn
            df1r, dw, db = core.linear_bwd(dr2, c_f2)
            grads[f"{p}.ffn2.w"] += dw
            grads[f"{p}.ffn2.b"] += db
            df1 = core.relu_bwd(df1r, f1_pre)
            dx_mid, dw, db = core.linear_bwd(df1, c_f1)
            grads[f"{p}.ffn1.w"] += dw
            grads[f"{p}.ffn1.b"] += db
            dx_mid = dx_mid + dr2
            dr1, dg, dbn = core.layernorm_bwd(dx_mid, c_ln1)
            grads[f"{p}.ln1_g"] += dg
            grads[f"{p}.ln1_b"] += dbn
            dao, dw, db = core.linear_bwd(dr1, c_o)
            grads[f"{p}.wo"] += dw
            grads[f"{p}.bo"] += db
            dq, dk, dv = core.attention_bwd(dao, c_attn)
            dx_in = dr1.copy()
            for dgrad, c_lin, wname, bname in (
                (dq, c_q, f"{p}.wq", f"{p}.bq"),
                (dk, c_k, f"{p}.wk", f"{p}.bk"),
                (dv, c_v, f"{p}.wv", f"{p}.bv"),
            ):
                dxi, dw, db = core.linear_bwd(dgrad, c_lin)
                grads[wname] += dw
                grads[bname] += db
                dx_in = dx_in + dxi
            dx = dx_in
        dtok = dx[:, :, :cfg.token_dim]
        dt_lin = dtok.reshape(dtok.shape[0], cfg.edge_tokens * cfg.token_dim)
        de, dw, db = core.linear_bwd(dt_lin, c_in)
        grads["edge_head.in.w"] += dw
        grads["edge_head.in.b"] += db
        return de

    # -- full pass -------------------------------------------------------------

    def forward(self, scene: PreparedScene, params: dict | None = None, rec: KinkRecorder | None = None):
        params = self.params if params is None else params
        n_layers = len(self.cfg.point_hidden) + 1
        x_n = scene.node_points.astype(self.dtype, copy=False)
        x_e = scene.edge_points.astype(self.dtype, copy=False)
        phi_n, c_enc_n = self._encode(params, "enc_node", x_n, scene.node_offsets, n_layers, rec)
        phi_e, c_enc_e = self._encode(params, "enc_edge", x_e, scene.edge_offsets, n_layers, rec)
        n, e, c_gnn = self._gnn(params, phi_n, phi_e, scene.subj, scene.obj, rec)
        n_out, c_nh = self._node_head(params, n, rec)
        e_out, c_eh = self._edge_head(params, e, rec)
        return n_out, e_out, (c_enc_n, c_enc_e, c_gnn, c_nh, c_eh)

    def backward(self, dn_out, de_out, cache, params: dict | None = None) -> dict:
        params = self.params if params is None else params
        c_enc_n, c_enc_e, c_gnn, c_nh, c_eh = cache
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        dn = self._node_head_bwd(dn_out, c_nh, grads)
        de = self._edge_head_bwd(de_out, c_eh, grads)
        dphi_n, dphi_e = self._gnn_bwd(dn, de, c_gnn, grads)
        n_layers = len(self.cfg.point_hidden) + 1
        self._encode_bwd("enc_node", dphi_n, c_enc_n, grads, n_layers)
        self._encode_bwd("enc_edge", dphi_e, c_enc_e, grads, n_layers)
        return grads

    # -- distillation loss -------------------------------------------------------

    def _present(self, scene: PreparedScene, targets):
        node_pos = [k for k, i in enumerate(scene.node_ids) if targets.node_targets.get(i) is not None]
        edge_pos = [k for k, pair in enumerate(scene.edge_pairs) if targets.edge_targets.get(pair) is not None]
        if not node_pos and not edge_pos:
            raise ValueError("scene has no present 2D targets on either side")
        return node_pos, edge_pos

    def _loss_terms(self, scene, targets, n_out, e_out, want_grads: bool):
        node_pos, edge_pos = self._present(scene, targets)
        dn_out = np.zeros_like(n_out)
        de_out = np.zeros_like(e_out)
        node_term = edge_term = 0.0
        if node_pos:
            pred = n_out[node_pos]
            tgt = np.stack([np.asarray(targets.node_targets[scene.node_ids[k]], dtype=self.dtype) for k in node_pos])
            if tgt.shape[1] != self.cfg.d_obj:
                raise ValueError(f"node target dim {tgt.shape[1]} != model d_obj {self.cfg.d_obj}")
            cos, c_cos = core.cosine_rows(pred, tgt)
            node_term = float(np.mean(1.0 - cos.astype(np.float64)))
            if want_grads:
                dcos = np.full(len(node_pos), -1.0 / len(node_pos), dtype=self.dtype)
                dpred, _ = core.cosine_rows_bwd(dcos, c_cos)
                dn_out[node_pos] = dpred
        if edge_pos:
            pred = e_out[edge_pos]
            tgt = np.stack([np.asarray(targets.edge_targets[scene.edge_pairs[k]], dtype=self.dtype) for k in edge_pos])
            if tgt.shape[1] != self.cfg.d_rel:
                raise ValueError(f"edge target dim {tgt.shape[1]} != model d_rel {self.cfg.d_rel}")
            cos, c_cos = core.cosine_rows(pred, tgt)
            edge_term = float(np.mean(1.0 - cos.astype(np.float64)))
            if want_grads:
                dcos = np.full(len(edge_pos), -1.0 / len(edge_pos), dtype=self.dtype)
                dpred, _ = core.cosine_rows_bwd(dcos, c_cos)
                de_out[edge_pos] = dpred
        return node_term, edge_term, dn_out, de_out

    def loss_and_grads(self, scene: PreparedScene, targets, params: dict | None = None):
        params = self.params if params is None else params
        n_out, e_out, cache = self.forward(scene, params=params)
        node_term, edge_term, dn_out, de_out = self._loss_terms(scene, targets, n_out, e_out, True)
        grads = self.backward(dn_out, de_out, cache, params=params)
        return node_term + edge_term, (node_term, edge_term), grads

    def loss_only(
        self, scene: PreparedScene, targets, params: dict | None = None, rec=None
    ) -> float:
        params = self.params if params is None else params
        n_out, e_out, _ = self.forward(scene, params=params, rec=rec)
        node_term, edge_term, _, _ = self._loss_terms(scene, targets, n_out, e_out, False)
        return node_term + edge_term
