"""Domain types shared by every other module: parents, attributes, config,
cameras, and the scene model that bundles stored geometry with the shared
networks.

A scene stores *only* parent positions and log-scales (plus the hash grid,
the network bundle, and contraction parameters). Everything else a renderer
needs is predicted on the fly. Parent data is kept as packed (P, 3) arrays;
`SceneModel.parents` materializes per-node views for callers that want the
one-node picture.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidConfig
from .hashgrid import HashGrid, HashGridConfig

PROV_INIT = 0
PROV_DENSIFIED = 1
PROV_PROMOTED = 2
PROVENANCE_NAMES = {PROV_INIT: "init", PROV_DENSIFIED: "densified",
                    PROV_PROMOTED: "promoted"}


@dataclass
class ParentNode:
    """The only persisted geometry: a stored splat seeding one tree.

    `position` is in world units; `log_scale` holds the log of the world
    extents so gradient updates can never produce a negative scale.
    """

    position: np.ndarray
    log_scale: np.ndarray

    def scale(self):
        return np.exp(self.log_scale)


@dataclass
class GaussianAttributes:
    """Full per-splat attribute set, stored or predicted."""

    position: np.ndarray   # (3,) world units
    scale: np.ndarray      # (3,) > 0
    rotation: np.ndarray   # (4,) unit quaternion, wxyz
    opacity: float         # in [0, 1]
    color: np.ndarray      # (3,) RGB in [0, 1]

    def validate(self):
        if not np.all(np.isfinite(self.position)):
            raise ValueError("non-finite position")
        if not np.all(self.scale > 0):
            raise ValueError("non-positive scale")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise ValueError("quaternion not unit-norm")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color outside [0, 1]")


@dataclass
class ModelConfig:
    """Scene-wide hyperparameters.

    feature_dim is split into a displacement half and an attribute half, so
    it must be even; the shipped presets use 32/48/64. children_per_parent
    is a per-scene constant, capped at 2.
    """

    feature_dim: int = 32
    children_per_parent: int = 2
    attention_lambda: float = 0.5
    sh_degree: int = 3
    grid_params: HashGridConfig = None
    offset_scale: float = 0.1      # world-unit bound on child displacement
    mlp_hidden: int = 64

    def __post_init__(self):
        if self.grid_params is None:
            self.grid_params = HashGridConfig.for_feature_dim(self.feature_dim)

    @property
    def half_dim(self):
        return self.feature_dim // 2


def validate_config(config: ModelConfig) -> None:
    """Raises InvalidConfig naming the first violated invariant."""
    d = config.feature_dim
    if d <= 0 or d % 2 != 0:
        raise InvalidConfig(f"feature_dim must be a positive even integer, got {d}")
    k = config.children_per_parent
    if not (0 <= k <= 2):
        raise InvalidConfig(f"children_per_parent capped at 2, got {k}")
    if config.attention_lambda < 0:
        raise InvalidConfig(f"attention_lambda must be >= 0, got {config.attention_lambda}")
    if config.sh_degree not in (1, 2, 3):
        raise InvalidConfig(f"sh_degree must be 1, 2, or 3, got {config.sh_degree}")
    g = config.grid_params
    if g.levels * g.features_per_level != d:
        raise InvalidConfig(
            f"grid levels*features ({g.levels}*{g.features_per_level}) "
            f"must equal feature_dim {d}")
    if g.table_size <= 0 or (g.table_size & (g.table_size - 1)) != 0:
        raise InvalidConfig(f"table_size must be a power of two, got {g.table_size}")
    if g.base_resolution < 2:
        raise InvalidConfig(f"base_resolution must be >= 2, got {g.base_resolution}")
    if g.growth_factor <= 1.0:
        raise InvalidConfig(f"growth_factor must be > 1, got {g.growth_factor}")
    if config.offset_scale <= 0:
        raise InvalidConfig(f"offset_scale must be > 0, got {config.offset_scale}")
    if config.mlp_hidden <= 0:
        raise InvalidConfig(f"mlp_hidden must be > 0, got {config.mlp_hidden}")


@dataclass
class Camera:
    """Pinhole camera. world_to_view maps world points to a frame with +z
    pointing into the screen, so view-space z is the depth."""

    world_to_view: np.ndarray          # (4, 4)
    focal: tuple                       # (fx, fy) pixels
    principal_point: tuple             # (cx, cy) pixels
    resolution: tuple                  # (width, height) pixels

    def __post_init__(self):
        self.world_to_view = np.asarray(self.world_to_view, dtype=np.float64)
        if self.world_to_view.shape != (4, 4):
            raise ValueError("world_to_view must be 4x4")
        r = self.world_to_view[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-5:
            raise ValueError("world_to_view rotation block is not orthonormal")
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self):
        return self.world_to_view[:3, :3]

    @property
    def translation(self):
        return self.world_to_view[:3, 3]

    def center(self):
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, width, height):
        """Same pose, intrinsics rescaled to a new pixel resolution."""
        sx = width / self.resolution[0]
        sy = height / self.resolution[1]
        return Camera(self.world_to_view.copy(),
                      (self.focal[0] * sx, self.focal[1] * sy),
                      (self.principal_point[0] * sx, self.principal_point[1] * sy),
                      (width, height))


class SceneModel:
    """Forest of parent splats plus the shared predictive machinery.

    Immutable while rendering; training and tree manipulation mutate it in a
    single-writer phase and bump `revision` so cached expansions can detect
    staleness.
    """

    def __init__(self, positions, log_scales, grid, nets, contraction, config,
                 provenance=None):
        self.positions = np.ascontiguousarray(positions)
        self.log_scales = np.ascontiguousarray(log_scales)
        if self.positions.shape != self.log_scales.shape or self.positions.ndim != 2 \
                or self.positions.shape[1] != 3:
            raise ValueError("positions and log_scales must both be (P, 3)")
        self.grid = grid
        self.nets = nets
        self.contraction = contraction
        self.config = config
        if provenance is None:
            provenance = np.zeros(len(self.positions), dtype=np.uint8)
        self.provenance = np.asarray(provenance, dtype=np.uint8)
        self.revision = 0

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def num_parents(self):
        return self.positions.shape[0]

    @property
    def splat_count(self):
        """Total splats after expansion: one parent plus K children per tree."""
        return self.num_parents * (self.config.children_per_parent + 1)

    @property
    def parents(self):
        """Per-node views over the packed arrays (mutating them mutates the scene)."""
        return [ParentNode(self.positions[i], self.log_scales[i])
                for i in range(self.num_parents)]

    def bump_revision(self):
        self.revision += 1

    def param_items(self):
        """All trainable parameters as (name, array) pairs, fixed order."""
        items = [("parent.position", self.positions),
                 ("parent.log_scale", self.log_scales),
                 ("grid.tables", self.grid.tables)]
        items.extend(self.nets.param_items())
        return items

    def set_param(self, name, value):
        if name == "parent.position":
            self.positions = value
        elif name == "parent.log_scale":
            self.log_scales = value
        elif name == "grid.tables":
            self.grid.tables = value
        else:
            self.nets.set_param(name, value)

    def validate(self):
        validate_config(self.config)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite parent position")
        scales = np.exp(self.log_scales)
        if not np.all(scales > 0):
            raise ValueError("parent scale must be positive")
        if self.contraction is not None:
            diag = self.contraction.scene_diagonal
            if not np.all(scales <= diag):
                raise ValueError("parent scale exceeds scene_diagonal")
        if self.grid.config.levels * self.grid.config.features_per_level \
                != self.config.feature_dim:
            raise ValueError("grid output dimension does not match feature_dim")

    def provenance_fractions(self):
        n = max(self.num_parents, 1)
        return {name: float(np.sum(self.provenance == code)) / n
                for code, name in PROVENANCE_NAMES.items()}

    @classmethod
    def create(cls, points, config, contraction=None, seed=0, dtype=np.float32):
        """Build a fresh scene from an initialization point cloud.

        Parent scales come from nearest-neighbor spacing (half the distance),
        and the child displacement bound is set to twice the median
        nearest-neighbor distance.
        """
        from .predictor import NetworkBundle
        from .spatial import estimate_aabb

        points = np.asarray(points, dtype=np.float64)
        if contraction is None:
            contraction = estimate_aabb(points)
        nn = _nearest_neighbor_dists(points)
        median_nn = float(np.median(nn))
        if median_nn <= 0:
            median_nn = 0.01 * contraction.scene_diagonal
        config.offset_scale = 2.0 * median_nn
        validate_config(config)
        scales = np.clip(0.5 * nn, 1e-7, contraction.scene_diagonal)
        rng = np.random.default_rng(seed)
        grid = HashGrid.create(config.grid_params, rng=rng, dtype=dtype)
        nets = NetworkBundle.create(config, rng=rng, dtype=dtype)
        return cls(points.astype(dtype),
                   np.log(scales)[:, None].repeat(3, axis=1).astype(dtype),
                   grid, nets, contraction, config)


def _nearest_neighbor_dists(points):
    from scipy.spatial import cKDTree
    if len(points) < 2:
        return np.full(len(points), 0.0)
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return d[:, 1]
