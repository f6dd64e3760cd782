"""Tree expansion: turn each stored parent into K+1 fully-attributed splats.

Pipeline per parent: contract the position into the unit cube, query the
grid, split the feature into a displacement half (drives child offsets) and
an attribute half. Children get their own grid queries at their predicted
positions; the K+1 attribute features are fused by a residual single-head
self-attention and fed to four small MLP heads (scale+rotation shared head,
color, opacity). Only node positions and the parent's stored scale are
geometric inputs; everything else is network output.

The batched forward keeps a tape so `predictor_backward` can push image-space
gradients all the way to the grid tables, the network weights, and the stored
parent position/log-scale arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import GaussianAttributes
from .errors import DimensionMismatch, StaleCache
from .hashgrid import query_batch, query_backward_batch
from .nets import (MLP2, normalize_rows, normalize_rows_backward, sh_basis,
                   sh_basis_backward, sh_basis_dim, sigmoid, sigmoid_backward)
from .spatial import (contract, contract_backward, to_unit_cube,
                      to_unit_cube_backward)

_QUAT_EPS = 1e-8
_IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass
class FeaturePair:
    f_delta: np.ndarray
    f_attr: np.ndarray


@dataclass
class AttentionParams:
    P1: np.ndarray   # (D/2, D/2), no bias
    P2: np.ndarray
    lam: float

    @property
    def d(self):
        """Softmax temperature divisor; fixed to the head dimension D/2."""
        return self.P1.shape[0]

    def astype(self, dtype):
        self.P1 = self.P1.astype(dtype)
        self.P2 = self.P2.astype(dtype)
        return self


class NetworkBundle:
    """The shared predictive networks: g_pos, g_rs, g_c, g_o and attention."""

    def __init__(self, g_pos, g_rs, g_c, g_o, attn):
        self.g_pos = g_pos
        self.g_rs = g_rs
        self.g_c = g_c
        self.g_o = g_o
        self.attn = attn
        self.degenerate_quat_count = 0

    @classmethod
    def create(cls, config, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        h = config.half_dim
        sh_dim = sh_basis_dim(config.sh_degree)
        hidden = config.mlp_hidden
        g_pos = MLP2("g_pos", h, config.children_per_parent * 3, rng, hidden, dtype)
        g_rs = MLP2("g_rs", h + 4, 7, rng, hidden, dtype)
        g_c = MLP2("g_c", h + sh_dim, 3, rng, hidden, dtype)
        g_o = MLP2("g_o", h + 3, 1, rng, hidden, dtype)
        scale = np.sqrt(1.0 / h)
        attn = AttentionParams(rng.normal(0.0, scale, (h, h)).astype(dtype),
                               rng.normal(0.0, scale, (h, h)).astype(dtype),
                               config.attention_lambda)
        return cls(g_pos, g_rs, g_c, g_o, attn)

    @staticmethod
    def head_input_dims(config):
        h = config.half_dim
        sh_dim = sh_basis_dim(config.sh_degree)
        return {"g_pos": h, "g_rs": h + 4, "g_c": h + sh_dim, "g_o": h + 3}

    @staticmethod
    def head_output_dims(config):
        return {"g_pos": config.children_per_parent * 3, "g_rs": 7,
                "g_c": 3, "g_o": 1}

    @property
    def heads(self):
        return (self.g_pos, self.g_rs, self.g_c, self.g_o)

    def param_items(self):
        items = [("attn.P1", self.attn.P1), ("attn.P2", self.attn.P2)]
        for head in self.heads:
            items.extend(head.param_items())
        return items

    def set_param(self, name, value):
        if name == "attn.P1":
            self.attn.P1 = value
        elif name == "attn.P2":
            self.attn.P2 = value
        else:
            head = {"g_pos": self.g_pos, "g_rs": self.g_rs,
                    "g_c": self.g_c, "g_o": self.g_o}[name.split(".")[0]]
            head.set_param(name, value)

    def astype(self, dtype):
        for head in self.heads:
            head.astype(dtype)
        self.attn.astype(dtype)
        return self


def split_features(f):
    """First half drives child displacement, second half the attributes."""
    f = np.asarray(f)
    d = f.shape[-1]
    if d == 0 or d % 2 != 0:
        raise DimensionMismatch(f"feature length must be positive even, got {d}")
    return FeaturePair(f[..., :d // 2], f[..., d // 2:])


def predict_child_positions(x_p, f_delta, nets, offset_scale):
    """x_k = x_p + offset_scale * tanh(g_pos(f_delta))_k; bounded offsets."""
    raw, _ = nets.g_pos.forward(np.asarray(f_delta))
    k = raw.shape[-1] // 3
    offsets = offset_scale * np.tanh(raw).reshape(k, 3)
    return np.asarray(x_p) + offsets


def fuse_attention_batch(f_stack, attn: AttentionParams):
    """Residual fusion over each tree's rows.

    f_stack: (Q, M, H). Returns (fused, cache). Values stay unprojected and
    there is no positional term, so the op is permutation-equivariant in M.
    """
    p1, p2, lam = attn.P1, attn.P2, attn.lam
    q_proj = f_stack @ p1.T
    k_proj = f_stack @ p2.T
    logits = q_proj @ np.swapaxes(k_proj, -1, -2) / np.sqrt(attn.d)
    logits = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits)
    weights = ex / ex.sum(axis=-1, keepdims=True)
    fused = f_stack + lam * (weights @ f_stack)
    return fused, (f_stack, q_proj, k_proj, weights)


def fuse_attention_backward(cache, attn: AttentionParams, grad_fused):
    f_stack, q_proj, k_proj, weights = cache
    lam = attn.lam
    grad_f = grad_fused.copy()
    grad_w = lam * (grad_fused @ np.swapaxes(f_stack, -1, -2))
    grad_f += lam * (np.swapaxes(weights, -1, -2) @ grad_fused)
    # softmax rows: dS = A * (dA - sum(dA * A))
    inner = np.sum(grad_w * weights, axis=-1, keepdims=True)
    grad_logits = weights * (grad_w - inner) / np.sqrt(attn.d)
    grad_q = grad_logits @ k_proj
    grad_k = np.swapaxes(grad_logits, -1, -2) @ q_proj
    h = f_stack.shape[-1]
    flat_f = f_stack.reshape(-1, h)
    grad_p1 = grad_q.reshape(-1, h).T @ flat_f
    grad_p2 = grad_k.reshape(-1, h).T @ flat_f
    grad_f += grad_q @ attn.P1 + grad_k @ attn.P2
    return grad_f, grad_p1, grad_p2


def fuse_attention(f_attr, attn: AttentionParams):
    """Single-tree wrapper: (M, H) -> (M, H)."""
    f_attr = np.asarray(f_attr)
    if f_attr.ndim != 2 or f_attr.shape[1] != attn.P1.shape[0]:
        raise DimensionMismatch(
            f"expected (rows, {attn.P1.shape[0]}), got {f_attr.shape}")
    fused, _ = fuse_attention_batch(f_attr[None], attn)
    return fused[0]


def _normalize_quats(raw, nets):
    """Unit quaternions with a guarded fallback for near-zero outputs."""
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < _QUAT_EPS
    n_bad = int(np.count_nonzero(degenerate))
    if n_bad:
        nets.degenerate_quat_count += n_bad
    safe = np.where(degenerate[..., None], 1.0, norm)
    quats = raw / safe
    if n_bad:
        quats = np.where(degenerate[..., None],
                         _IDENTITY_QUAT.astype(raw.dtype), quats)
    return quats, safe, degenerate


def predict_scale_rotation(f_attr_k, x_k, b_k, s_p, is_parent, nets):
    """Shared head: log scale multipliers and a rotation for one node.

    Children scale the parent's stored scale multiplicatively; the parent
    keeps its stored scale untouched no matter what the head outputs.
    """
    s_p = np.asarray(s_p)
    inp = np.concatenate([np.asarray(f_attr_k), np.asarray(x_k),
                          np.atleast_1d(b_k)]).astype(s_p.dtype, copy=False)
    out, _ = nets.g_rs.forward(inp[None])
    s_log, q_raw = out[0, :3], out[0, 3:]
    quat, _, _ = _normalize_quats(q_raw[None], nets)
    scale = s_p if is_parent else np.exp(s_log) * s_p
    return scale, quat[0]


def predict_color(f_attr_k, d_k, sh_degree, nets):
    """View-dependent RGB via a spherical-harmonic direction encoding."""
    basis = sh_basis(np.asarray(d_k)[None], sh_degree)
    inp = np.concatenate([np.asarray(f_attr_k)[None], basis], axis=1)
    out, _ = nets.g_c.forward(inp)
    return sigmoid(out[0])


def predict_opacity(f_attr_k, x_k, nets):
    inp = np.concatenate([np.asarray(f_attr_k), np.asarray(x_k)])[None]
    out, _ = nets.g_o.forward(inp)
    return float(sigmoid(out[0, 0]))


@dataclass
class _Tape:
    parent_positions: np.ndarray     # (Q, 3) as fed in
    parent_scales: np.ndarray        # (Q, 3) exp(log_scale)
    unit_parent: np.ndarray
    cache_parent: list
    feats_parent: np.ndarray
    gpos_cache: tuple
    tanh_raw: np.ndarray             # tanh(g_pos output), (Q, K*3)
    child_flat: np.ndarray           # (Q*K, 3)
    unit_child: np.ndarray
    cache_child: list
    attn_cache: tuple
    fused_flat: np.ndarray           # (N, H)
    center: np.ndarray               # contraction center in model dtype
    b_diff: np.ndarray               # (N, 3) node - center
    b_norm: np.ndarray               # (N,)
    rs_cache: tuple
    s_mult: np.ndarray               # (Q, M, 3) exp(s_log)
    quat_norm: np.ndarray            # (N, 1) guarded norms
    quat_degenerate: np.ndarray      # (N,) bool
    o_cache: tuple
    cam_center: Optional[np.ndarray]
    dir_units: Optional[np.ndarray]  # (N, 3)
    dir_norms: Optional[np.ndarray]
    sh_vals: Optional[np.ndarray]
    c_cache: Optional[tuple]


@dataclass
class ExpandedForest:
    """Struct-of-arrays expansion of a set of parents. Node 0 of each tree
    is the parent; flat views interleave trees in row-major (tree, node)
    order so flat index = tree * (K+1) + node."""

    parent_indices: np.ndarray
    positions: np.ndarray            # (Q, K+1, 3)
    scales: np.ndarray               # (Q, K+1, 3)
    rotations: np.ndarray            # (Q, K+1, 4) unit wxyz
    opacities: np.ndarray            # (Q, K+1)
    colors: Optional[np.ndarray]     # (Q, K+1, 3) or None
    revision: int
    tape: Optional[_Tape]

    @property
    def num_trees(self):
        return self.positions.shape[0]

    @property
    def nodes_per_tree(self):
        return self.positions.shape[1]

    @property
    def num_nodes(self):
        return self.positions.shape[0] * self.positions.shape[1]

    def flat_positions(self):
        return self.positions.reshape(-1, 3)

    def flat_scales(self):
        return self.scales.reshape(-1, 3)

    def flat_rotations(self):
        return self.rotations.reshape(-1, 4)

    def flat_opacities(self):
        return self.opacities.reshape(-1)

    def flat_colors(self):
        return self.colors.reshape(-1, 3)


def expand_forest(model, camera=None, parent_indices=None, with_colors=True):
    """Batched expansion of the selected parents (all of them by default)."""
    if with_colors and camera is None:
        raise ValueError("color prediction needs a camera")
    cfg = model.config
    if parent_indices is None:
        parent_indices = np.arange(model.num_parents)
    parent_indices = np.asarray(parent_indices, dtype=np.int64)
    dtype = model.dtype
    k = cfg.children_per_parent
    m = k + 1
    h = cfg.half_dim
    nets = model.nets

    xp = model.positions[parent_indices]
    sp = np.exp(model.log_scales[parent_indices])
    q = xp.shape[0]

    unit_p = to_unit_cube(contract(xp, model.contraction), model.contraction)
    feats_p, cache_p = query_batch(model.grid, unit_p)
    f_delta, f_attr_p = feats_p[:, :h], feats_p[:, h:]

    raw, gpos_cache = nets.g_pos.forward(f_delta)
    th = np.tanh(raw)
    offsets = (cfg.offset_scale * th).reshape(q, k, 3)
    children = xp[:, None, :] + offsets
    child_flat = children.reshape(-1, 3)
    unit_c = to_unit_cube(contract(child_flat, model.contraction),
                          model.contraction)
    feats_c, cache_c = query_batch(model.grid, unit_c)
    f_attr_c = feats_c[:, h:].reshape(q, k, h)

    f_stack = np.concatenate([f_attr_p[:, None, :], f_attr_c], axis=1)
    fused, attn_cache = fuse_attention_batch(f_stack, nets.attn)
    fused_flat = fused.reshape(-1, h)

    positions = np.concatenate([xp[:, None, :], children], axis=1)
    pos_flat = positions.reshape(-1, 3)
    center = model.contraction.center.astype(dtype)
    b_diff = pos_flat - center
    b_norm = np.linalg.norm(b_diff, axis=1)

    rs_in = np.concatenate([fused_flat, pos_flat, b_norm[:, None]], axis=1)
    rs_out, rs_cache = nets.g_rs.forward(rs_in)
    s_mult = np.exp(rs_out[:, :3]).reshape(q, m, 3)
    quats, quat_norm, quat_degen = _normalize_quats(rs_out[:, 3:], nets)
    scales = s_mult * sp[:, None, :]
    scales[:, 0, :] = sp            # parent keeps its stored scale

    o_in = np.concatenate([fused_flat, pos_flat], axis=1)
    o_out, o_cache = nets.g_o.forward(o_in)
    opacities = sigmoid(o_out[:, 0]).reshape(q, m)

    cam_center = dir_units = dir_norms = sh_vals = c_cache = None
    colors = None
    if with_colors:
        cam_center = camera.center().astype(dtype)
        dir_units, dir_norms = normalize_rows(pos_flat - cam_center, eps=1e-12)
        sh_vals = sh_basis(dir_units, cfg.sh_degree)
        c_in = np.concatenate([fused_flat, sh_vals], axis=1)
        c_out, c_cache = nets.g_c.forward(c_in)
        colors = sigmoid(c_out).reshape(q, m, 3)

    tape = _Tape(xp, sp, unit_p, cache_p, feats_p, gpos_cache, th, child_flat,
                 unit_c, cache_c, attn_cache, fused_flat, center, b_diff,
                 b_norm, rs_cache, s_mult, quat_norm, quat_degen, o_cache,
                 cam_center, dir_units, dir_norms, sh_vals, c_cache)
    return ExpandedForest(parent_indices, positions, scales,
                          quats.reshape(q, m, 4), opacities, colors,
                          model.revision, tape)


def zero_grads(model):
    return {name: np.zeros_like(arr) for name, arr in model.param_items()}


def predictor_backward(model, forest: ExpandedForest, upstream, grads=None):
    """Chain rule from per-node attribute grads down to every parameter.

    `upstream` maps any of {"positions", "scales", "rotations", "opacities",
    "colors"} to arrays shaped like the forest fields. Returns the grads
    dict (keys = model.param_items() names). Parent-position rows also
    collect the child-offset chain, so tree geometry trains end to end.
    """
    t = forest.tape
    if t is None:
        raise ValueError("forest was expanded without a tape")
    cfg = model.config
    nets = model.nets
    h = cfg.half_dim
    q = forest.num_trees
    m = forest.nodes_per_tree
    k = m - 1
    n = q * m
    dtype = model.dtype
    if grads is None:
        grads = zero_grads(model)

    def up(name, shape):
        val = upstream.get(name)
        if val is None:
            return np.zeros(shape, dtype=dtype)
        return np.asarray(val, dtype=dtype)

    grad_pos_flat = up("positions", (q, m, 3)).reshape(n, 3).copy()
    grad_fused = np.zeros((n, h), dtype=dtype)

    # color head
    if forest.colors is not None:
        g_col = up("colors", (q, m, 3)).reshape(n, 3)
        if np.any(g_col):
            g_craw = sigmoid_backward(forest.flat_colors(), g_col)
            g_cin = nets.g_c.backward(t.c_cache, g_craw, grads)
            grad_fused += g_cin[:, :h]
            g_dirs = sh_basis_backward(t.dir_units, cfg.sh_degree, g_cin[:, h:])
            grad_pos_flat += normalize_rows_backward(t.dir_units, t.dir_norms,
                                                     g_dirs)

    # opacity head
    g_op = up("opacities", (q, m)).reshape(n)
    if np.any(g_op):
        g_oraw = sigmoid_backward(forest.flat_opacities(), g_op)[:, None]
        g_oin = nets.g_o.backward(t.o_cache, g_oraw, grads)
        grad_fused += g_oin[:, :h]
        grad_pos_flat += g_oin[:, h:]

    # scales: children are multiplicative on the parent scale
    g_scale = up("scales", (q, m, 3))
    grad_s_log = np.zeros((q, m, 3), dtype=dtype)
    if k:
        grad_s_log[:, 1:, :] = g_scale[:, 1:, :] * forest.scales[:, 1:, :]
    grad_sp = g_scale[:, 0, :].copy()
    if k:
        grad_sp += np.sum(g_scale[:, 1:, :] * t.s_mult[:, 1:, :], axis=1)

    # rotations through the normalization (degenerate rows are constants)
    g_rot = up("rotations", (q, m, 4)).reshape(n, 4)
    g_qraw = normalize_rows_backward(forest.flat_rotations(), t.quat_norm,
                                     g_rot)
    if np.any(t.quat_degenerate):
        g_qraw[t.quat_degenerate] = 0.0

    g_rsout = np.concatenate([grad_s_log.reshape(n, 3), g_qraw], axis=1)
    g_rsin = nets.g_rs.backward(t.rs_cache, g_rsout, grads)
    grad_fused += g_rsin[:, :h]
    grad_pos_flat += g_rsin[:, h:h + 3]
    g_b = g_rsin[:, h + 3]
    b_safe = np.maximum(t.b_norm, 1e-12)
    grad_pos_flat += (g_b / b_safe)[:, None] * t.b_diff

    # attention
    g_stack, g_p1, g_p2 = fuse_attention_backward(t.attn_cache, nets.attn,
                                                  grad_fused.reshape(q, m, h))
    grads["attn.P1"] += g_p1
    grads["attn.P2"] += g_p2

    # children: grid queries at child positions, then the offset chain
    g_pos_nodes = grad_pos_flat.reshape(q, m, 3)
    grad_xp = g_pos_nodes[:, 0, :].copy()
    if k:
        up_child = np.zeros((q * k, 2 * h), dtype=dtype)
        up_child[:, h:] = g_stack[:, 1:, :].reshape(q * k, h)
        pos_g_unit = query_backward_batch(model.grid, t.unit_child,
                                          t.cache_child, up_child,
                                          grads["grid.tables"])
        grad_child = contract_backward(
            t.child_flat, model.contraction,
            to_unit_cube_backward(model.contraction, pos_g_unit))
        grad_child = grad_child + g_pos_nodes[:, 1:, :].reshape(q * k, 3)
        grad_xp += grad_child.reshape(q, k, 3).sum(axis=1)
        g_th = (cfg.offset_scale * grad_child).reshape(q, k * 3)
        g_raw = g_th * (1.0 - t.tanh_raw ** 2)
        g_fdelta = nets.g_pos.backward(t.gpos_cache, g_raw, grads)
    else:
        g_fdelta = np.zeros((q, h), dtype=dtype)

    # parent grid query
    up_parent = np.concatenate([g_fdelta, g_stack[:, 0, :]], axis=1)
    pos_g_unit = query_backward_batch(model.grid, t.unit_parent, t.cache_parent,
                                      up_parent, grads["grid.tables"])
    grad_xp += contract_backward(
        t.parent_positions, model.contraction,
        to_unit_cube_backward(model.contraction, pos_g_unit))

    np.add.at(grads["parent.position"], forest.parent_indices, grad_xp)
    np.add.at(grads["parent.log_scale"], forest.parent_indices,
              grad_sp * t.parent_scales)
    return grads


@dataclass
class ExpandedTree:
    """Single-tree view with an optional static cache for re-coloring."""

    nodes: list
    cached_static: Optional[dict] = None


def _tree_from_forest(forest: ExpandedForest, fused_rows):
    nodes = [GaussianAttributes(position=forest.positions[0, i].copy(),
                                scale=forest.scales[0, i].copy(),
                                rotation=forest.rotations[0, i].copy(),
                                opacity=float(forest.opacities[0, i]),
                                color=(forest.colors[0, i].copy()
                                       if forest.colors is not None else None))
             for i in range(forest.nodes_per_tree)]
    cache = {"revision": forest.revision,
             "positions": forest.positions[0].copy(),
             "scales": forest.scales[0].copy(),
             "rotations": forest.rotations[0].copy(),
             "opacities": forest.opacities[0].copy(),
             "fused": fused_rows.copy()}
    return ExpandedTree(nodes, cache)


class _SoloParentModel:
    """Adapter exposing one parent (given by value) as a one-row model."""

    def __init__(self, model, parent):
        self.config = model.config
        self.grid = model.grid
        self.nets = model.nets
        self.contraction = model.contraction
        self.revision = model.revision
        self.positions = np.asarray(parent.position,
                                    dtype=model.dtype).reshape(1, 3)
        self.log_scales = np.asarray(parent.log_scale,
                                     dtype=model.dtype).reshape(1, 3)
        self.num_parents = 1

    @property
    def dtype(self):
        return self.positions.dtype


def expand_tree(parent, camera, model) -> ExpandedTree:
    """One parent -> K+1 attributed nodes (node 0 is the parent itself)."""
    solo = _SoloParentModel(model, parent)
    forest = expand_forest(solo, camera, np.array([0]))
    return _tree_from_forest(forest, forest.tape.fused_flat)


def expand_tree_cached(parent, camera, model, cache) -> ExpandedTree:
    """Re-render an expanded tree for a new camera.

    Geometry and opacity are view-independent, so only the color head runs;
    a model mutated since the cache was built raises StaleCache.
    """
    if cache is None or cache.get("revision") != model.revision:
        raise StaleCache("tree cache predates the current model revision")
    cfg = model.config
    pos = cache["positions"]
    cam_center = camera.center().astype(pos.dtype)
    dirs, _ = normalize_rows(pos - cam_center, eps=1e-12)
    sh_vals = sh_basis(dirs, cfg.sh_degree)
    c_in = np.concatenate([cache["fused"], sh_vals], axis=1)
    c_out, _ = model.nets.g_c.forward(c_in)
    colors = sigmoid(c_out)
    nodes = [GaussianAttributes(position=pos[i].copy(),
                                scale=cache["scales"][i].copy(),
                                rotation=cache["rotations"][i].copy(),
                                opacity=float(cache["opacities"][i]),
                                color=colors[i].copy())
             for i in range(pos.shape[0])]
    return ExpandedTree(nodes, cache)


def recolor_forest(model, forest: ExpandedForest, camera) -> ExpandedForest:
    """Forest-level analogue of expand_tree_cached for fast multi-view eval."""
    if forest.revision != model.revision:
        raise StaleCache("forest cache predates the current model revision")
    t = forest.tape
    cfg = model.config
    pos_flat = forest.flat_positions()
    cam_center = camera.center().astype(pos_flat.dtype)
    dirs, _ = normalize_rows(pos_flat - cam_center, eps=1e-12)
    sh_vals = sh_basis(dirs, cfg.sh_degree)
    c_in = np.concatenate([t.fused_flat, sh_vals], axis=1)
    c_out, _ = model.nets.g_c.forward(c_in)
    colors = sigmoid(c_out).reshape(forest.positions.shape)
    return ExpandedForest(forest.parent_indices, forest.positions,
                          forest.scales, forest.rotations, forest.opacities,
                          colors, forest.revision, None)
