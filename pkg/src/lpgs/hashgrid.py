"""Multiresolution hash-grid feature field over the unit cube.

L levels of lattice resolution N_l = floor(N_min * b^l). Each level owns a
table of T rows of F features. Coarse levels whose full lattice fits in T
index densely (collision-free); finer levels fall back to an XOR spatial
hash masked to the table size. A query trilinearly interpolates the 8
surrounding corners per level and concatenates level outputs, coarse first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfUnitCube

# Well-studied spatial hash multipliers; first axis left unmultiplied.
_HASH_PRIMES = (1, 2654435761, 805459861)

# Binary corner offsets of a cell, x fastest.
_CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)],
                    dtype=np.int64)

_QUERY_TOL = 1e-9


@dataclass
class HashGridConfig:
    levels: int
    table_size: int
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5

    def __post_init__(self):
        self.levels = int(self.levels)
        self.table_size = int(self.table_size)
        self.features_per_level = int(self.features_per_level)
        self.base_resolution = int(self.base_resolution)
        self.growth_factor = float(self.growth_factor)

    @property
    def output_dim(self):
        return self.levels * self.features_per_level

    @property
    def resolutions(self):
        # tiny eps so b computed from a target finest resolution lands exactly
        return tuple(int(np.floor(self.base_resolution
                                  * self.growth_factor ** level + 1e-9))
                     for level in range(self.levels))

    @classmethod
    def for_feature_dim(cls, feature_dim, table_size=2 ** 19,
                        base_resolution=16, finest_resolution=2048):
        """Default layout: D/2 levels of 2 features, geometric growth chosen
        so the last level hits the requested finest resolution."""
        levels = feature_dim // 2
        if levels > 1:
            growth = (finest_resolution / base_resolution) ** (1.0 / (levels - 1))
        else:
            growth = 2.0
        return cls(levels=levels, table_size=table_size, features_per_level=2,
                   base_resolution=base_resolution, growth_factor=growth)


def hash_index(level_resolution, corner, table_size):
    """Table row for a lattice corner. Dense row-major when the whole
    (N+1)^3 lattice fits in the table, XOR spatial hash otherwise."""
    corner = np.asarray(corner, dtype=np.int64)
    pts = level_resolution + 1
    if pts ** 3 <= table_size:
        return (corner[..., 0] + pts * corner[..., 1]
                + pts * pts * corner[..., 2])
    c = corner.astype(np.uint64)
    h = (c[..., 0] * np.uint64(_HASH_PRIMES[0])
         ^ c[..., 1] * np.uint64(_HASH_PRIMES[1])
         ^ c[..., 2] * np.uint64(_HASH_PRIMES[2]))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


class HashGrid:
    def __init__(self, config: HashGridConfig, tables):
        self.config = config
        self.tables = tables    # (L, T, F)
        if tables.shape != (config.levels, config.table_size,
                            config.features_per_level):
            raise ValueError("tables shape does not match config")

    @classmethod
    def create(cls, config, rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        tables = rng.uniform(-1e-4, 1e-4,
                             (config.levels, config.table_size,
                              config.features_per_level)).astype(dtype)
        return cls(config, tables)

    @property
    def dtype(self):
        return self.tables.dtype

    def astype(self, dtype):
        return HashGrid(self.config, self.tables.astype(dtype))


def _check_unit_cube(points):
    worst = max(float(np.max(-points, initial=0.0)),
                float(np.max(points - 1.0, initial=0.0)))
    if worst > _QUERY_TOL:
        raise OutOfUnitCube(f"query point outside [0,1]^3 by {worst:.3e}")
    return np.clip(points, 0.0, 1.0)


def query_batch(grid: HashGrid, points):
    """Interpolated features for (N, 3) unit-cube points.

    Returns (features (N, D), cache); the cache feeds query_backward_batch.
    """
    pts = _check_unit_cube(np.atleast_2d(np.asarray(points)))
    n = pts.shape[0]
    cfg = grid.config
    out = np.empty((n, cfg.output_dim), dtype=grid.dtype)
    cache = []
    for level, res in enumerate(cfg.resolutions):
        scaled = pts * res
        cell = np.minimum(np.floor(scaled), res - 1).astype(np.int64)
        frac = scaled - cell                       # in [0, 1]
        corners = cell[:, None, :] + _CORNERS[None, :, :]      # (N, 8, 3)
        idx = hash_index(res, corners, cfg.table_size)         # (N, 8)
        # weight = prod over axes of frac (bit set) or 1-frac (bit clear)
        w_axis = np.where(_CORNERS[None, :, :] == 1,
                          frac[:, None, :], 1.0 - frac[:, None, :])
        weights = w_axis.prod(axis=2)                          # (N, 8)
        gathered = grid.tables[level][idx]                     # (N, 8, F)
        f0 = level * cfg.features_per_level
        out[:, f0:f0 + cfg.features_per_level] = \
            (weights[:, :, None] * gathered).sum(axis=1)
        cache.append((idx, frac, weights))
    return out, cache


def query_backward_batch(grid: HashGrid, points, cache, upstream,
                         table_grad):
    """Backward of query_batch.

    Accumulates table gradients into the dense (L, T, F) buffer `table_grad`
    (hash collisions merge by summation) and returns position gradients
    (N, 3). `points` must be the forward inputs; corner indices and weights
    come from the cache.
    """
    pts = np.atleast_2d(np.asarray(points))
    upstream = np.atleast_2d(np.asarray(upstream))
    cfg = grid.config
    pos_grad = np.zeros_like(pts)
    for level, res in enumerate(cfg.resolutions):
        idx, frac, weights = cache[level]
        f0 = level * cfg.features_per_level
        up = upstream[:, f0:f0 + cfg.features_per_level]       # (N, F)
        np.add.at(table_grad[level], idx.ravel(),
                  (weights[:, :, None] * up[:, None, :]).reshape(-1, cfg.features_per_level))
        # position grad: d weight / d frac_a = +-prod of the other two axes
        gathered = grid.tables[level][idx]                     # (N, 8, F)
        corner_dot = np.einsum("ncf,nf->nc", gathered, up)     # (N, 8)
        w_axis = np.where(_CORNERS[None, :, :] == 1,
                          frac[:, None, :], 1.0 - frac[:, None, :])
        sign = np.where(_CORNERS[None, :, :] == 1, 1.0, -1.0)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            dw = sign[:, :, axis] * w_axis[:, :, others[0]] * w_axis[:, :, others[1]]
            pos_grad[:, axis] += res * np.sum(corner_dot * dw, axis=1)
    return pos_grad


def query(grid: HashGrid, p):
    """Single-point convenience wrapper around query_batch."""
    feats, _ = query_batch(grid, np.asarray(p)[None, :])
    return feats[0]


def query_backward(grid: HashGrid, p, upstream_grad):
    """Single-point backward. Returns (table_grads, position_grad) with
    table_grads as a {(level, row): F-vector} dict of touched entries."""
    p = np.asarray(p)[None, :]
    _, cache = query_batch(grid, p)
    dense = np.zeros_like(grid.tables, dtype=np.float64)
    pos = query_backward_batch(grid, p, cache,
                               np.asarray(upstream_grad)[None, :], dense)
    touched = {}
    for level, (idx, _, _) in enumerate(cache):
        for row in np.unique(idx):
            touched[(level, int(row))] = dense[level, row].copy()
    return touched, pos[0]
