"""Differentiable CPU splat renderer.

Forward: world-space gaussians are projected to 2D (local affine
approximation of the pinhole map), globally depth-sorted (stable, ties keep
insertion order), binned to 16x16 tiles by their 3-sigma bound, and blended
front to back with a transmittance early-out below 1e-4. The gaussian
footprint is hard-cut at 3 sigma (q > 9 evaluates to exactly 0), which makes
tiled output identical to a naive all-splats-per-pixel evaluation, not just
close to it.

Backward: per tile, the blend is re-derived with suffix sums so every
pixel/splat pair is handled in one vectorized pass; gradients land on
mean2d, conic -> cov2d, color, and opacity, then flow through the projection
Jacobian back to 3D position, scale, and rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spatial import CULL_DEPTH, frustum_cull

TILE = 16
EARLY_OUT_T = 1e-4     # stop blending once transmittance drops below this
CUTOFF_Q = 9.0         # 3-sigma footprint bound on the Mahalanobis square
COV_REG = 0.3          # px^2 added to the 2D covariance diagonal
DET_EPS = 1e-12


def quat_to_rotmat(q):
    """(..., 4) unit quaternions (w, x, y, z) -> (..., 3, 3)."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_rotmat_backward(q, grad_r):
    """Pull a rotation-matrix gradient back to the quaternion components."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    gw = 2 * (-z * grad_r[..., 0, 1] + y * grad_r[..., 0, 2]
              + z * grad_r[..., 1, 0] - x * grad_r[..., 1, 2]
              - y * grad_r[..., 2, 0] + x * grad_r[..., 2, 1])
    gx = 2 * (y * grad_r[..., 0, 1] + z * grad_r[..., 0, 2]
              + y * grad_r[..., 1, 0] - 2 * x * grad_r[..., 1, 1]
              - w * grad_r[..., 1, 2] + z * grad_r[..., 2, 0]
              + w * grad_r[..., 2, 1] - 2 * x * grad_r[..., 2, 2])
    gy = 2 * (-2 * y * grad_r[..., 0, 0] + x * grad_r[..., 0, 1]
              + w * grad_r[..., 0, 2] + x * grad_r[..., 1, 0]
              + z * grad_r[..., 1, 2] - w * grad_r[..., 2, 0]
              + z * grad_r[..., 2, 1] - 2 * y * grad_r[..., 2, 2])
    gz = 2 * (-2 * z * grad_r[..., 0, 0] - w * grad_r[..., 0, 1]
              + x * grad_r[..., 0, 2] + w * grad_r[..., 1, 0]
              - 2 * z * grad_r[..., 1, 1] + y * grad_r[..., 1, 2]
              + x * grad_r[..., 2, 0] + y * grad_r[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def build_covariance_batch(scales, rotations):
    """Sigma = R S S^T R^T for (N, 3) scales and (N, 4) unit quaternions."""
    rot = quat_to_rotmat(rotations)
    m = rot * scales[:, None, :]          # R @ diag(s)
    sigma = m @ np.swapaxes(m, -1, -2)
    return sigma, (scales, rotations, rot, m)


def build_covariance_backward(cache, grad_sigma):
    scales, rotations, rot, m = cache
    gm = (grad_sigma + np.swapaxes(grad_sigma, -1, -2)) @ m
    grad_rot = gm * scales[:, None, :]
    grad_scale = np.sum(gm * rot, axis=-2)
    grad_quat = quat_to_rotmat_backward(rotations, grad_rot)
    return grad_scale, grad_quat


def build_covariance(scale, rotation):
    """Single-splat wrapper: 3-vector scale + unit quaternion -> 3x3."""
    sigma, _ = build_covariance_batch(np.asarray(scale)[None],
                                      np.asarray(rotation)[None])
    return sigma[0]


@dataclass
class Gaussian2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W, 3) in [0, 1]
    alpha: np.ndarray                 # (H, W) accumulated opacity
    contrib_pixels: np.ndarray        # per input splat: pixels it touched
    contrib_weight: np.ndarray        # per input splat: summed blend weight
    singular_skipped: int = 0


@dataclass
class _ProjTape:
    positions: np.ndarray
    t_view: np.ndarray                # (N, 3) view-space points
    cov_cache: tuple
    sigma: np.ndarray
    v: np.ndarray                     # (N, 2, 3) J @ W
    j: np.ndarray                     # (N, 2, 3)
    rot_cam: np.ndarray
    focal: tuple
    kept: np.ndarray                  # indices into the input arrays


def project_batch(positions, scales, rotations, camera, tape=False):
    """EWA-style projection of world gaussians to image-plane gaussians.

    Returns (means2d, covs2d, depths, kept, tape) where `kept` indexes the
    splats in front of the near-depth threshold; outputs are compacted.
    """
    dtype = positions.dtype
    rot_cam = camera.rotation.astype(dtype)
    trans = camera.translation.astype(dtype)
    fx = dtype.type(camera.focal[0])
    fy = dtype.type(camera.focal[1])
    cx = dtype.type(camera.principal_point[0])
    cy = dtype.type(camera.principal_point[1])

    t_all = positions @ rot_cam.T + trans
    kept = np.nonzero(t_all[:, 2] > CULL_DEPTH)[0]
    t = t_all[kept]
    pos = positions[kept]
    sc = scales[kept]
    qt = rotations[kept]

    sigma, cov_cache = build_covariance_batch(sc, qt)
    tz = t[:, 2]
    means2d = np.stack([fx * t[:, 0] / tz + cx, fy * t[:, 1] / tz + cy],
                       axis=1)
    n = t.shape[0]
    j = np.zeros((n, 2, 3), dtype=dtype)
    j[:, 0, 0] = fx / tz
    j[:, 0, 2] = -fx * t[:, 0] / tz ** 2
    j[:, 1, 1] = fy / tz
    j[:, 1, 2] = -fy * t[:, 1] / tz ** 2
    v = j @ rot_cam
    covs = v @ sigma @ np.swapaxes(v, -1, -2)
    covs[:, 0, 0] += COV_REG
    covs[:, 1, 1] += COV_REG
    pt = _ProjTape(pos, t, cov_cache, sigma, v, j, rot_cam, (fx, fy), kept) \
        if tape else None
    return means2d, covs, tz.copy(), kept, pt


def project_backward(pt: _ProjTape, grad_mean2d, grad_cov2d):
    """Gradients w.r.t. kept splats' world position, scale, quaternion."""
    fx, fy = pt.focal
    t = pt.t_view
    tz = t[:, 2]
    v = pt.v
    grad_sigma = np.swapaxes(v, -1, -2) @ grad_cov2d @ v
    gv = (grad_cov2d + np.swapaxes(grad_cov2d, -1, -2)) @ v @ pt.sigma
    gj = gv @ pt.rot_cam.T

    gt = np.zeros_like(t)
    # mean2d = (fx tx / tz + cx, fy ty / tz + cy)
    gt[:, 0] += grad_mean2d[:, 0] * fx / tz
    gt[:, 1] += grad_mean2d[:, 1] * fy / tz
    gt[:, 2] -= (grad_mean2d[:, 0] * fx * t[:, 0]
                 + grad_mean2d[:, 1] * fy * t[:, 1]) / tz ** 2
    # J entries J00 = fx/tz, J02 = -fx tx/tz^2 (row 1 mirrored)
    gt[:, 0] += gj[:, 0, 2] * (-fx / tz ** 2)
    gt[:, 1] += gj[:, 1, 2] * (-fy / tz ** 2)
    gt[:, 2] += (-gj[:, 0, 0] * fx / tz ** 2
                 - gj[:, 1, 1] * fy / tz ** 2
                 + gj[:, 0, 2] * 2 * fx * t[:, 0] / tz ** 3
                 + gj[:, 1, 2] * 2 * fy * t[:, 1] / tz ** 3)
    grad_pos = gt @ pt.rot_cam
    grad_scale, grad_quat = build_covariance_backward(pt.cov_cache, grad_sigma)
    return grad_pos, grad_scale, grad_quat


def project(attrs, camera) -> Optional[Gaussian2D]:
    """Single-splat wrapper; returns None when the splat is depth-culled."""
    means, covs, depths, kept, _ = project_batch(
        np.asarray(attrs.position, dtype=np.float64)[None],
        np.asarray(attrs.scale, dtype=np.float64)[None],
        np.asarray(attrs.rotation, dtype=np.float64)[None], camera)
    if kept.size == 0:
        return None
    return Gaussian2D(means[0], covs[0], float(depths[0]),
                      np.asarray(attrs.color, dtype=np.float64),
                      float(attrs.opacity))


@dataclass
class _RasterTape:
    width: int
    height: int
    means: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    background: np.ndarray
    tiles: list                       # (y0, y1, x0, x1, stack) per busy tile
    valid: np.ndarray                 # indices of splats that rasterized
    n_input: int


def _prepare_splats(means2d, covs2d, depths, width, height):
    """Conics, 3-sigma radii, validity, and the global depth order."""
    c00 = covs2d[:, 0, 0]
    c01 = covs2d[:, 0, 1]
    c11 = covs2d[:, 1, 1]
    det = c00 * c11 - c01 * c01
    valid = det >= DET_EPS
    singular = int(np.count_nonzero(~valid))
    det_safe = np.where(valid, det, 1.0)
    conics = np.empty_like(covs2d)
    conics[:, 0, 0] = c11 / det_safe
    conics[:, 0, 1] = -c01 / det_safe
    conics[:, 1, 0] = -c01 / det_safe
    conics[:, 1, 1] = c00 / det_safe
    mid = 0.5 * (c00 + c11)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))
    on_image = ((means2d[:, 0] + radius >= 0)
                & (means2d[:, 0] - radius <= width - 1)
                & (means2d[:, 1] + radius >= 0)
                & (means2d[:, 1] - radius <= height - 1))
    live = np.nonzero(valid & on_image)[0]
    order = live[np.argsort(depths[live], kind="stable")]
    return conics, radius, order, singular


def _tile_stacks(means2d, radius, order, width, height):
    """Splat stacks per 16x16 tile, each sorted by global depth rank."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    if order.size == 0:
        return {}, ntx, nty
    mx = means2d[order, 0]
    my = means2d[order, 1]
    r = radius[order]
    tx0 = np.clip(np.floor((mx - r) / TILE).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(np.floor((mx + r) / TILE).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(np.floor((my - r) / TILE).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(np.floor((my + r) / TILE).astype(np.int64), 0, nty - 1)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    dx = np.arange(int(nx.max()))
    dy = np.arange(int(ny.max()))
    tiles_x = tx0[:, None, None] + dx[None, None, :]
    tiles_y = ty0[:, None, None] + dy[None, :, None]
    inside = (dx[None, None, :] < nx[:, None, None]) \
        & (dy[None, :, None] < ny[:, None, None])
    tile_ids = (tiles_y * ntx + tiles_x)[inside]
    ranks = np.broadcast_to(np.arange(order.size)[:, None, None],
                            inside.shape)[inside]
    perm = np.lexsort((ranks, tile_ids))
    tile_ids = tile_ids[perm]
    ranks = ranks[perm]
    stacks = {}
    bounds = np.searchsorted(tile_ids, np.arange(ntx * nty + 1))
    for tid in np.unique(tile_ids):
        lo, hi = bounds[tid], bounds[tid + 1]
        stacks[int(tid)] = order[ranks[lo:hi]]
    return stacks, ntx, nty


def _tile_blend(pix, means, conics, colors, opacities, stack):
    """Vectorized front-to-back blend of one tile's stack.

    pix: (P, 2) integer sample coordinates. Returns the per-pixel color
    accumulation, final transmittance, and the masked per-splat weights.
    """
    delta = pix[:, None, :] - means[stack][None, :, :]
    con = conics[stack]
    q = (con[None, :, 0, 0] * delta[:, :, 0] ** 2
         + 2.0 * con[None, :, 0, 1] * delta[:, :, 0] * delta[:, :, 1]
         + con[None, :, 1, 1] * delta[:, :, 1] ** 2)
    g = np.where(q <= CUTOFF_Q, np.exp(-0.5 * q), 0.0)
    w = opacities[stack][None, :] * g
    t_run = np.cumprod(1.0 - w, axis=1)
    t_before = np.concatenate(
        [np.ones((w.shape[0], 1), dtype=w.dtype), t_run[:, :-1]], axis=1)
    include = t_before >= EARLY_OUT_T       # prefix mask: T is nonincreasing
    wi = w * include
    t_masked = np.cumprod(1.0 - wi, axis=1)
    tb_masked = np.concatenate(
        [np.ones((w.shape[0], 1), dtype=w.dtype), t_masked[:, :-1]], axis=1)
    contrib = wi * tb_masked
    color_acc = contrib @ colors[stack]
    t_final = t_masked[:, -1]
    return delta, g, include, wi, tb_masked, contrib, color_acc, t_final


def rasterize_arrays(means2d, covs2d, depths, colors, opacities, background,
                     width, height, with_tape=False):
    """Array-level rasterization; inputs are parallel per-splat arrays."""
    dtype = means2d.dtype
    n = means2d.shape[0]
    background = np.asarray(background, dtype=dtype)
    conics, radius, order, singular = _prepare_splats(
        means2d, covs2d, depths, width, height)
    stacks, ntx, nty = _tile_stacks(means2d, radius, order, width, height)

    image = np.empty((height, width, 3), dtype=dtype)
    image[:] = background
    alpha = np.zeros((height, width), dtype=dtype)
    contrib_pixels = np.zeros(n, dtype=np.int64)
    contrib_weight = np.zeros(n, dtype=dtype)
    tiles = []
    for tid, stack in stacks.items():
        ty, tx = divmod(tid, ntx)
        y0, y1 = ty * TILE, min(ty * TILE + TILE, height)
        x0, x1 = tx * TILE, min(tx * TILE + TILE, width)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(dtype)
        (_, _, _, _, _, contrib, color_acc,
         t_final) = _tile_blend(pix, means2d, conics, colors, opacities, stack)
        ph, pw = y1 - y0, x1 - x0
        image[y0:y1, x0:x1] = (color_acc
                               + t_final[:, None] * background).reshape(ph, pw, 3)
        alpha[y0:y1, x0:x1] = (1.0 - t_final).reshape(ph, pw)
        np.add.at(contrib_pixels, stack, (contrib > 0).sum(axis=0))
        np.add.at(contrib_weight, stack, contrib.sum(axis=0).astype(dtype))
        tiles.append((y0, y1, x0, x1, stack))
    out = RenderOutput(image, alpha, contrib_pixels, contrib_weight, singular)
    tape = _RasterTape(width, height, means2d, conics, colors, opacities,
                       background, tiles, order, n) if with_tape else None
    return out, tape


def rasterize(splats, background, width, height):
    """List-of-Gaussian2D wrapper matching the one-splat-at-a-time view."""
    n = len(splats)
    means = np.zeros((n, 2))
    covs = np.zeros((n, 2, 2))
    depths = np.zeros(n)
    colors = np.zeros((n, 3))
    ops = np.zeros(n)
    for i, s in enumerate(splats):
        means[i] = s.mean2d
        covs[i] = s.cov2d
        depths[i] = s.depth
        colors[i] = s.color
        ops[i] = s.opacity
    out, _ = rasterize_arrays(means, covs, depths, colors, ops,
                              background, width, height)
    return out


def rasterize_backward(tape: _RasterTape, grad_image, grad_alpha=None):
    """Gradients w.r.t. every input splat's mean2d, cov2d, color, opacity.

    Tile blends are recomputed in 64-bit and differentiated with exclusive
    suffix sums: out = sum_i w_i T_i u_i + T_N bg, so dL/dw_i =
    T_i * dL/dout . (u_i - A_{i+1}) with A the blend of everything behind i.
    A is recovered as suffix/T, valid because the early-out keeps the
    divisors above EARLY_OUT_T * (1 - w).
    """
    n = tape.n_input
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    g_color = np.zeros((n, 3))
    g_op = np.zeros(n)
    if grad_alpha is None:
        grad_alpha = np.zeros((tape.height, tape.width))
    means = tape.means.astype(np.float64)
    conics = tape.conics.astype(np.float64)
    colors = tape.colors.astype(np.float64)
    ops = tape.opacities.astype(np.float64)
    bg4 = np.concatenate([tape.background.astype(np.float64), [0.0]])
    colors4 = np.concatenate([colors, np.ones((n, 1))], axis=1)

    for y0, y1, x0, x1, stack in tape.tiles:
        ys, xs = np.mgrid[y0:y1, x0:x1]
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        delta, g, include, wi, tb, contrib, _, t_final = _tile_blend(
            pix, means, conics, colors, ops, stack)
        dout4 = np.concatenate(
            [grad_image[y0:y1, x0:x1].reshape(-1, 3),
             grad_alpha[y0:y1, x0:x1].reshape(-1, 1)], axis=1).astype(np.float64)

        u4 = colors4[stack]                          # (S, 4)
        term = contrib[:, :, None] * u4[None, :, :]  # (P, S, 4)
        rc = np.flip(np.cumsum(np.flip(term, 1), 1), 1)
        suffix = rc - term + (t_final[:, None] * bg4[None, :])[:, None, :]
        t_after = np.cumprod(1.0 - wi, axis=1)
        denom = np.maximum(t_after, 1e-30)
        a_next = suffix / denom[:, :, None]
        # a 0/0 (fully opaque splat) leaves A at the background it replaced
        a_next = np.where(t_after[:, :, None] < 1e-30, 0.0, a_next)

        dw = np.einsum("pc,psc->ps", dout4, u4[None, :, :] - a_next) * tb
        dw *= include                    # early-out exclusion is a constant
        np.add.at(g_color, stack,
                  np.einsum("ps,pc->sc", contrib, dout4[:, :3]))
        np.add.at(g_op, stack, np.sum(dw * g, axis=0))
        dg = dw * ops[stack][None, :]
        dq = -0.5 * g * dg
        con = conics[stack]
        ddx = 2.0 * (con[None, :, 0, 0] * delta[:, :, 0]
                     + con[None, :, 0, 1] * delta[:, :, 1]) * dq
        ddy = 2.0 * (con[None, :, 0, 1] * delta[:, :, 0]
                     + con[None, :, 1, 1] * delta[:, :, 1]) * dq
        np.add.at(g_mean, stack,
                  -np.stack([ddx.sum(axis=0), ddy.sum(axis=0)], axis=1))
        dcq = np.empty((pix.shape[0], len(stack), 2, 2))
        dcq[:, :, 0, 0] = delta[:, :, 0] ** 2
        dcq[:, :, 0, 1] = delta[:, :, 0] * delta[:, :, 1]
        dcq[:, :, 1, 0] = dcq[:, :, 0, 1]
        dcq[:, :, 1, 1] = delta[:, :, 1] ** 2
        np.add.at(g_conic, stack,
                  np.einsum("ps,psij->sij", dq, dcq))

    g_cov = -conics @ g_conic @ conics
    dtype = tape.means.dtype
    return {"mean2d": g_mean.astype(dtype), "cov2d": g_cov.astype(dtype),
            "color": g_color.astype(dtype), "opacity": g_op.astype(dtype)}


@dataclass
class RenderTape:
    forest: object
    proj: _ProjTape
    rast: _RasterTape
    kept: np.ndarray


def render_forest(forest, camera, background, with_tape=False):
    """Project + rasterize an already expanded forest."""
    pos = forest.flat_positions()
    means, covs, depths, kept, pt = project_batch(
        pos, forest.flat_scales(), forest.flat_rotations(), camera,
        tape=with_tape)
    out, rt = rasterize_arrays(
        means, covs, depths, forest.flat_colors()[kept],
        forest.flat_opacities()[kept], background,
        camera.resolution[0], camera.resolution[1], with_tape=with_tape)
    tape = RenderTape(forest, pt, rt, kept) if with_tape else None
    return out, tape


def render(model, camera, background=(0.0, 0.0, 0.0), forest=None):
    """Full pipeline: cull parents, expand trees, project, blend."""
    from .predictor import expand_forest
    if forest is None:
        mask = frustum_cull(model.positions, camera.world_to_view)
        forest = expand_forest(model, camera, np.nonzero(mask)[0])
    out, _ = render_forest(forest, camera,
                           np.asarray(background, dtype=model.dtype))
    return out


def render_training(model, camera, background=(0.0, 0.0, 0.0)):
    """Render with every tape retained; pair with render_backward."""
    from .predictor import expand_forest
    mask = frustum_cull(model.positions, camera.world_to_view)
    forest = expand_forest(model, camera, np.nonzero(mask)[0])
    out, tape = render_forest(forest, camera,
                              np.asarray(background, dtype=model.dtype),
                              with_tape=True)
    return out, tape


def render_backward(model, tape: RenderTape, grad_image, grad_alpha=None,
                    grads=None):
    """Image gradient -> every model parameter.

    Returns (grads, aux); aux carries the per-splat screen-space position
    gradients and index maps the densification logic feeds on.
    """
    from .predictor import predictor_backward, zero_grads
    forest = tape.forest
    sg = rasterize_backward(tape.rast, grad_image, grad_alpha)
    gp, gs, gq = project_backward(tape.proj, sg["mean2d"], sg["cov2d"])

    n_nodes = forest.num_nodes
    kept = tape.kept
    up_pos = np.zeros((n_nodes, 3), dtype=model.dtype)
    up_scale = np.zeros((n_nodes, 3), dtype=model.dtype)
    up_rot = np.zeros((n_nodes, 4), dtype=model.dtype)
    up_op = np.zeros(n_nodes, dtype=model.dtype)
    up_col = np.zeros((n_nodes, 3), dtype=model.dtype)
    up_pos[kept] = gp
    up_scale[kept] = gs
    up_rot[kept] = gq
    up_op[kept] = sg["opacity"]
    up_col[kept] = sg["color"]

    q, m = forest.num_trees, forest.nodes_per_tree
    upstream = {"positions": up_pos.reshape(q, m, 3),
                "scales": up_scale.reshape(q, m, 3),
                "rotations": up_rot.reshape(q, m, 4),
                "opacities": up_op.reshape(q, m),
                "colors": up_col.reshape(q, m, 3)}
    if grads is None:
        grads = zero_grads(model)
    grads = predictor_backward(model, forest, upstream, grads)
    aux = {"mean2d_grads": sg["mean2d"], "kept_nodes": kept,
           "parent_indices": forest.parent_indices,
           "nodes_per_tree": m}
    return grads, aux
