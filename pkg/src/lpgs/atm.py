"""Tree maintenance: promotion, densification, pruning.

Statistics accumulate between maintenance events: per-node view-space
positional gradient norms (pixel gradients scaled by half the image size)
with visibility counts, the mean world-space position gradient per parent,
and the observed maxima of each parent's opacity and scale. At an event,
children whose mean gradient exceeds the promote threshold become parents
at their predicted position and scale; parents whose mean gradient exceeds
the densify threshold are cloned (small ones, offset by one gradient step)
or split into two samples with scales reduced by the split divisor; trees
whose observed peak opacity or scale never reached the prune floors are
deleted. Stats reset after every event.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import PROV_DENSIFIED, PROV_PROMOTED
from .errors import EmptyScene, InvalidConfig
from .predictor import expand_forest


@dataclass
class ATMConfig:
    promote_threshold: float = 2e-4
    densify_threshold: float = 2e-4
    split_scale_factor: float = 0.01    # fraction of scene extent
    split_scale_divisor: float = 1.6
    split_samples: int = 2
    prune_opacity: float = 0.005
    prune_scale: float = 1e-5           # world units

    def __post_init__(self):
        if self.promote_threshold <= 0:
            raise InvalidConfig("promote_threshold must be positive")
        if self.densify_threshold <= 0:
            raise InvalidConfig("densify_threshold must be positive")
        if self.split_scale_divisor <= 1.0:
            raise InvalidConfig("split_scale_divisor must exceed 1")
        if self.split_samples < 2:
            raise InvalidConfig("split_samples must be at least 2")
        if not (0.0 <= self.prune_opacity < 1.0):
            raise InvalidConfig("prune_opacity must be in [0, 1)")


class ATMStats:
    """Per-parent accumulators for one maintenance window."""

    def __init__(self, num_parents, children_per_parent):
        self.children_per_parent = children_per_parent
        self.reset(num_parents)

    def reset(self, num_parents):
        k = self.children_per_parent
        self.num_parents = num_parents
        self.parent_grad = np.zeros(num_parents)
        self.parent_count = np.zeros(num_parents, dtype=np.int64)
        self.parent_grad3d = np.zeros((num_parents, 3))
        self.child_grad = np.zeros((num_parents, k))
        self.child_count = np.zeros((num_parents, k), dtype=np.int64)
        self.max_opacity = np.zeros(num_parents)
        self.max_scale = np.zeros(num_parents)

    def mean_parent_grad(self):
        return self.parent_grad / np.maximum(self.parent_count, 1)

    def mean_child_grad(self):
        return self.child_grad / np.maximum(self.child_count, 1)


def accumulate(stats: ATMStats, model, forest, aux, grads, resolution):
    """Fold one rendered view's gradients into the stats window.

    aux comes from the render backward pass: pixel-space mean gradients for
    the splats that survived projection, plus their flat node indices.
    A node counts as visible when it survived projection this step.
    """
    if stats.num_parents != model.num_parents:
        raise ValueError("stats were built for a different parent count")
    q = forest.num_trees
    m = forest.nodes_per_tree
    w, h = resolution
    scale = np.array([w / 2.0, h / 2.0])
    norms_flat = np.zeros(q * m)
    vis_flat = np.zeros(q * m, dtype=bool)
    kept = aux["kept_nodes"]
    if kept.size:
        norms_flat[kept] = np.linalg.norm(
            np.asarray(aux["mean2d_grads"], dtype=np.float64) * scale, axis=1)
        vis_flat[kept] = True
    norms = norms_flat.reshape(q, m)
    vis = vis_flat.reshape(q, m)
    idx = forest.parent_indices
    stats.parent_grad[idx] += norms[:, 0]
    stats.parent_count[idx] += vis[:, 0]
    if m > 1:
        stats.child_grad[idx] += norms[:, 1:]
        stats.child_count[idx] += vis[:, 1:]
    stats.parent_grad3d[idx] += np.asarray(grads["parent.position"],
                                           dtype=np.float64)[idx]
    stats.max_opacity[idx] = np.maximum(
        stats.max_opacity[idx], np.asarray(forest.opacities[:, 0],
                                           dtype=np.float64))
    stats.max_scale[idx] = np.maximum(
        stats.max_scale[idx], np.asarray(forest.scales[:, 0, :],
                                         dtype=np.float64).max(axis=1))


def _scene_extent(model):
    if model.contraction is not None:
        return float(model.contraction.r_inner)
    if model.num_parents == 0:
        return 1.0
    span = model.positions.max(axis=0) - model.positions.min(axis=0)
    return max(float(span.max()) / 2.0, 1e-6)


def run_maintenance(model, stats: ATMStats, cfg: ATMConfig, opt_state, rng,
                    step_size=1.6e-4):
    """One maintenance event: promote, then densify, then prune.

    Decisions are taken from the stats window on the pre-event parent set;
    new parents enter with fresh optimizer moments and empty stats, so they
    are exempt until they accumulate a full window. Returns an event record.
    """
    p_before = model.num_parents
    if p_before == 0:
        raise EmptyScene("cannot maintain a scene with no parents")
    if stats.num_parents != p_before:
        raise ValueError("stats were built for a different parent count")
    dtype = model.dtype
    extent = _scene_extent(model)

    promote_mask = stats.mean_child_grad() > cfg.promote_threshold
    densify_mask = stats.mean_parent_grad() > cfg.densify_threshold
    prune_mask = ((stats.max_opacity < cfg.prune_opacity)
                  | (stats.max_scale < cfg.prune_scale))
    empty_scene_warning = False
    if prune_mask.all():
        warnings.warn("pruning would remove every parent; skipped",
                      RuntimeWarning)
        prune_mask[:] = False
        empty_scene_warning = True
    densify_mask &= ~prune_mask
    clone_mask = densify_mask & (stats.max_scale
                                 < cfg.split_scale_factor * extent)
    split_mask = densify_mask & ~clone_mask

    new_positions = []
    new_log_scales = []
    new_provenance = []

    promoted_rows = np.unique(np.nonzero(promote_mask)[0])
    n_promoted = 0
    if promoted_rows.size:
        forest = expand_forest(model, parent_indices=promoted_rows,
                               with_colors=False)
        for row, p in enumerate(promoted_rows):
            for k in np.nonzero(promote_mask[p])[0]:
                new_positions.append(forest.positions[row, 1 + k])
                new_log_scales.append(
                    np.log(np.maximum(forest.scales[row, 1 + k], 1e-30)))
                new_provenance.append(PROV_PROMOTED)
                n_promoted += 1

    mean_grad3d = stats.parent_grad3d / np.maximum(stats.parent_count,
                                                   1)[:, None]
    clone_idx = np.nonzero(clone_mask)[0]
    for p in clone_idx:
        new_positions.append(model.positions[p]
                             - step_size * mean_grad3d[p].astype(dtype))
        new_log_scales.append(model.log_scales[p].copy())
        new_provenance.append(PROV_DENSIFIED)

    split_idx = np.nonzero(split_mask)[0]
    log_div = np.log(cfg.split_scale_divisor)
    for p in split_idx:
        sp = np.exp(model.log_scales[p].astype(np.float64))
        for _ in range(cfg.split_samples):
            sample = model.positions[p].astype(np.float64) \
                + sp * rng.standard_normal(3)
            new_positions.append(sample)
            new_log_scales.append(model.log_scales[p] - log_div)
            new_provenance.append(PROV_DENSIFIED)

    removals = split_mask | prune_mask
    kept = np.nonzero(~removals)[0]
    n_new = len(new_positions)
    if len(kept) + n_new == 0:
        raise EmptyScene("maintenance would leave no parents")

    if n_new or removals.any():
        add_pos = np.asarray(new_positions, dtype=dtype).reshape(n_new, 3)
        add_ls = np.asarray(new_log_scales, dtype=dtype).reshape(n_new, 3)
        model.positions = np.concatenate([model.positions[kept], add_pos])
        model.log_scales = np.concatenate([model.log_scales[kept], add_ls])
        model.provenance = np.concatenate(
            [model.provenance[kept],
             np.asarray(new_provenance, dtype=np.uint8)])
        model.bump_revision()
        opt_state.remap_parents(kept, n_new)

    stats.reset(model.num_parents)
    return {"event": "atm",
            "promoted": n_promoted,
            "cloned": int(clone_idx.size),
            "split": int(split_idx.size),
            "pruned": int(prune_mask.sum()),
            "parents_before": p_before,
            "parents_after": model.num_parents,
            "empty_scene_warning": empty_scene_warning}
