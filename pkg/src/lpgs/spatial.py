"""Scene-space plumbing: bounding-box estimation, sphere contraction that
folds unbounded scenes into a cube, the affine map onto [0,1]^3, and
depth-threshold view culling.

The contraction is radial around the scene center O: the closed inner ball
(radius R_inner) maps to itself, everything outside maps to radius
R_outer - 1/r, so infinity lands on the outer sphere. All points therefore
end up strictly inside the cube of half-side R_outer. The default formula
is kept verbatim even though it is discontinuous at r = R_inner for general
radii; `continuous=True` swaps in a variant that matches at the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegeneratePointCloud, OutOfBox

CULL_DEPTH = 0.201          # view-space depth threshold, strict >
_OVERSHOOT_TOL = 1e-6       # beyond this, a unit-cube overshoot is an upstream bug

SQRT3 = float(np.sqrt(3.0))


@dataclass
class ContractionParams:
    center: np.ndarray     # O, world units
    r_inner: float
    r_outer: float
    continuous: bool = False   # boundary-matched variant instead of the verbatim map

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.r_inner = float(self.r_inner)
        self.r_outer = float(self.r_outer)
        if not (self.r_inner > 0):
            raise ValueError("r_inner must be positive")
        if not (self.r_outer > self.r_inner):
            raise ValueError("r_outer must exceed r_inner")

    @property
    def aabb_min(self):
        return self.center - self.r_outer

    @property
    def aabb_max(self):
        return self.center + self.r_outer

    @property
    def scene_diagonal(self):
        """Full diagonal of the estimated box (cube circumscribing S_outer)."""
        return 2.0 * SQRT3 * self.r_outer


def estimate_aabb(points, continuous=False) -> ContractionParams:
    """Cubified bounding box of the initialization cloud.

    Center = box center; R_inner = max half-extent over the three axes;
    R_outer = sqrt(3) * R_inner so the inner cube's circumscribed sphere
    becomes the outer sphere.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 2:
        raise DegeneratePointCloud("need at least 2 points, shape (N, 3)")
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    half = float(np.max(hi - lo)) / 2.0
    if half <= 0:
        raise DegeneratePointCloud("all initialization points coincide")
    center = (lo + hi) / 2.0
    return ContractionParams(center, half, SQRT3 * half, continuous=continuous)


def _radial_gain(r, params):
    """g(r) with p' - O = g(r) * (p - O), for the outside-the-ball branch."""
    if params.continuous:
        # f(r) = R_outer - (R_outer - R_inner) * R_inner / r, g = f/r
        c = (params.r_outer - params.r_inner) * params.r_inner
        return params.r_outer / r - c / (r * r)
    return params.r_outer / r - 1.0 / (r * r)


def _radial_gain_slope(r, params):
    """d g(r) / d r."""
    if params.continuous:
        c = (params.r_outer - params.r_inner) * params.r_inner
        return -params.r_outer / (r * r) + 2.0 * c / (r ** 3)
    return -params.r_outer / (r * r) + 2.0 / (r ** 3)


def contract(p, params: ContractionParams):
    """Radial contraction. Accepts (3,) or (N, 3); returns the same shape."""
    p = np.asarray(p)
    single = p.ndim == 1
    pts = np.atleast_2d(p).astype(np.float64)
    v = pts - params.center
    r = np.linalg.norm(v, axis=1)
    inside = r <= params.r_inner
    r_safe = np.where(inside, 1.0, r)
    g = _radial_gain(r_safe, params)
    out = np.where(inside[:, None], pts, params.center + g[:, None] * v)
    out = out.astype(p.dtype, copy=False)
    return out[0] if single else out


def contract_backward(p, params: ContractionParams, grad_out):
    """Pulls a gradient at contract(p) back to p.

    Jacobian for the outer branch is g(r)*(I - uu^T) + f'(r)*uu^T with
    u = (p-O)/r; identity inside the ball. Symmetric, so J^T v = J v.
    """
    p = np.asarray(p)
    single = p.ndim == 1
    pts = np.atleast_2d(p).astype(np.float64)
    g_out = np.atleast_2d(np.asarray(grad_out)).astype(np.float64)
    v = pts - params.center
    r = np.linalg.norm(v, axis=1)
    inside = r <= params.r_inner
    r_safe = np.where(inside, 1.0, r)
    gain = _radial_gain(r_safe, params)
    slope = _radial_gain_slope(r_safe, params)
    u = v / r_safe[:, None]
    udotg = np.sum(u * g_out, axis=1)
    grad_p = gain[:, None] * g_out + (slope * r_safe * udotg)[:, None] * u
    grad_p = np.where(inside[:, None], g_out, grad_p)
    grad_p = grad_p.astype(p.dtype, copy=False)
    return grad_p[0] if single else grad_p


def to_unit_cube(p_contracted, params: ContractionParams):
    """Affine map from the estimated box onto [0,1]^3.

    Floating-point overshoot up to 1e-6 is clamped; anything larger means a
    point reached here without contraction and raises OutOfBox.
    """
    p = np.asarray(p_contracted)
    q = (p.astype(np.float64) - params.aabb_min) / (2.0 * params.r_outer)
    overshoot = np.maximum(np.maximum(-q, q - 1.0), 0.0)
    worst = float(overshoot.max()) if q.size else 0.0
    if worst > _OVERSHOOT_TOL:
        raise OutOfBox(f"point leaves the unit cube by {worst:.3e}; "
                       "was it contracted first?")
    return np.clip(q, 0.0, 1.0).astype(p.dtype, copy=False)


def to_unit_cube_backward(params: ContractionParams, grad_out):
    """Gradient of to_unit_cube (the clamp acts only on float noise)."""
    grad = np.asarray(grad_out)
    return (grad.astype(np.float64) / (2.0 * params.r_outer)).astype(
        grad.dtype, copy=False)


def frustum_cull(points, world_to_view, threshold=CULL_DEPTH):
    """Keep points whose view-space depth is strictly above the threshold.

    Depth is row 2 of M @ [p; 1]; no lateral frustum-plane tests.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = np.asarray(world_to_view, dtype=np.float64)
    depth = pts @ m[2, :3] + m[2, 3]
    return depth > threshold
