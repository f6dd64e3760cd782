"""Objective, metrics, schedules, optimizer, and the training loop.

The loss is (1 - beta) * L1 + beta * (1 - SSIM) / 2 with an analytic
gradient image; SSIM uses the standard 11x11 Gaussian window (sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2) with zero-padded borders, which keeps the filter
self-adjoint so the backward pass reuses the same convolution.

Each parameter group has its own exponential rate schedule: the grid decays
2e-3 to 2e-5, the opacity head 1e-3 to 2e-5, scale/rotation sits at 1e-4,
attention at 2e-4, and parent positions decay 1.6e-4 to 1.6e-6; any group
without a listed rate uses the attention rate. Updates are adaptive-moment
steps with betas (0.9, 0.999) and epsilon 1e-15.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from . import atm as atm_mod
from .dataset import downscale_image
from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss, UnknownGroup
from .rasterizer import render, render_backward, render_training

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

PSNR_CAP = 100.0

DEFAULT_LR_TABLE = {
    "grid": (2e-3, 2e-5),
    "opacity": (1e-3, 2e-5),
    "scale_rotation": (1e-4, 1e-4),
    "attention": (2e-4, 2e-4),
    "heads": (2e-4, 2e-4),
    "parent_position": (1.6e-4, 1.6e-6),
}


def group_of(param_name):
    """Learning-rate group for a named parameter."""
    head = param_name.split(".")[0]
    if head == "grid":
        return "grid"
    if head == "g_o":
        return "opacity"
    if head == "g_rs":
        return "scale_rotation"
    if head == "attn":
        return "attention"
    if param_name == "parent.position":
        return "parent_position"
    if param_name == "parent.log_scale":
        return "scale_rotation"
    return "heads"          # g_pos, g_c: rates unlisted, use the default


def lr_at(step, group, lr_table, total_steps):
    """Exponential interpolation between a group's initial and final rate."""
    if group not in lr_table:
        raise UnknownGroup(f"no learning rate defined for group '{group}'")
    initial, final = lr_table[group]
    if initial == final or total_steps <= 0 or step <= 0:
        return initial
    if step >= total_steps:
        return final
    return initial * (final / initial) ** (step / total_steps)


@dataclass
class TrainConfig:
    total_steps: int = 5000
    beta: float = 0.2
    warmup_steps: int = 1250
    warmup_downscale: int = 2
    lr_table: dict = field(default_factory=lambda: dict(DEFAULT_LR_TABLE))
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 4000
    atm: Optional["atm_mod.ATMConfig"] = None
    seed: int = 0
    resolution: Optional[tuple] = None     # (width, height); set from data
    frozen_groups: frozenset = frozenset()
    background: tuple = (0.0, 0.0, 0.0)
    log_psnr_every: int = 50

    def __post_init__(self):
        if not (0.0 <= self.beta <= 1.0):
            raise InvalidConfig(f"beta must be in [0, 1], got {self.beta}")
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise InvalidConfig("warmup_steps must be below total_steps")


def _gauss_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter(img):
    """Separable Gaussian window, zero-padded; applied per channel."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def _ssim_fields(a, b):
    mu_a = _filter(a)
    mu_b = _filter(b)
    var_a = _filter(a * a) - mu_a * mu_a
    var_b = _filter(b * b) - mu_b * mu_b
    cov = _filter(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(a, b):
    """Mean windowed structural similarity over pixels and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    _, _, a1, a2, b1, b2 = _ssim_fields(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(a, b):
    """(ssim, d ssim / d a); the filter is self-adjoint under zero padding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mu_a, mu_b, a1, a2, b1, b2 = _ssim_fields(a, b)
    value = float(np.mean(a1 * a2 / (b1 * b2)))
    up = 1.0 / a.size
    denom = b1 * b2
    f_mu = up * (2.0 * mu_b * a2 / denom - 2.0 * mu_a * a1 * a2 / (denom * b1))
    f_var = up * (-a1 * a2 / (denom * b2))
    f_cov = up * (2.0 * a1 / denom)
    grad = (_filter(f_mu)
            + 2.0 * a * _filter(f_var) - 2.0 * _filter(f_var * mu_a)
            + b * _filter(f_cov) - _filter(f_cov * mu_b))
    return value, grad


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(-10.0 * math.log10(mse), PSNR_CAP)


def loss(rendered, gt, beta):
    """Scalar objective plus its gradient image w.r.t. the rendered pixels."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_pair(rendered, gt)
    diff = rendered - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - beta) * np.sign(diff) / diff.size
    if beta > 0.0:
        s, ds = ssim_with_grad(rendered, gt)
        value = (1.0 - beta) * l1 + beta * (1.0 - s) / 2.0
        grad = grad - (beta / 2.0) * ds
    else:
        value = l1
    return value, grad


def warmup_resolution(step, config: TrainConfig):
    """Image size for this step; reduced during warm-up."""
    w, h = config.resolution
    if step < config.warmup_steps and config.warmup_downscale > 1:
        return max(w // config.warmup_downscale, 1), \
            max(h // config.warmup_downscale, 1)
    return w, h


class OptimizerState:
    """Adaptive-moment accumulators, one (m, v) pair per named parameter."""

    def __init__(self, model):
        self.moments = {name: (np.zeros_like(arr), np.zeros_like(arr))
                        for name, arr in model.param_items()}
        self.t = 0

    def apply(self, model, grads, step, config: TrainConfig):
        self.t += 1
        for name, param in model.param_items():
            group = group_of(name)
            if group in config.frozen_groups:
                continue
            rate = lr_at(step, group, config.lr_table, config.total_steps)
            g = grads[name]
            m, v = self.moments[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            m_hat = m / (1.0 - ADAM_BETA1 ** self.t)
            v_hat = v / (1.0 - ADAM_BETA2 ** self.t)
            param -= (rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(
                param.dtype, copy=False)

    def remap_parents(self, kept_indices, n_new):
        """Carry per-parent moments across a tree-manipulation event."""
        for name in ("parent.position", "parent.log_scale"):
            m, v = self.moments[name]
            self.moments[name] = (
                np.concatenate([m[kept_indices],
                                np.zeros((n_new, 3), dtype=m.dtype)]),
                np.concatenate([v[kept_indices],
                                np.zeros((n_new, 3), dtype=v.dtype)]))

    def validate(self, model):
        for name, arr in model.param_items():
            m, v = self.moments[name]
            if m.shape != arr.shape or v.shape != arr.shape:
                raise ValueError(f"moment shape mismatch for {name}")


def _find_nonfinite_group(model, grads=None):
    for name, arr in model.param_items():
        if not np.all(np.isfinite(arr)):
            return group_of(name)
    if grads:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                return group_of(name)
    return None


def train_step(model, opt_state: OptimizerState, camera, gt_image, step,
               config: TrainConfig, atm_stats=None):
    """One optimization step on one view. Returns (loss value, info)."""
    h, w = gt_image.shape[:2]
    cam = camera if camera.resolution == (w, h) else camera.scaled(w, h)
    out, tape = render_training(model, cam, config.background)
    value, grad_img = loss(out.image, gt_image, config.beta)
    if not np.isfinite(value):
        group = _find_nonfinite_group(model) or "render"
        raise NonFiniteLoss(f"loss is not finite at step {step}; "
                            f"suspect group: {group}")
    grads, aux = render_backward(model, tape, grad_img.astype(model.dtype))
    bad = _find_nonfinite_group(model, grads)
    if bad is not None:
        raise NonFiniteLoss(f"non-finite gradient at step {step} "
                            f"in group: {bad}")
    if atm_stats is not None:
        atm_mod.accumulate(atm_stats, model, tape.forest, aux, grads,
                           cam.resolution)
    opt_state.apply(model, grads, step, config)
    info = {"psnr": psnr(out.image, gt_image),
            "parents": model.num_parents,
            "splats": model.splat_count}
    return value, info


def run_training(dataset, model, config: TrainConfig):
    """Optimize the model on (camera, image) pairs; returns (model, log).

    Cameras are visited in a seeded shuffled order, re-shuffled per epoch.
    Tree maintenance runs every densify_interval steps inside the
    [densify_start, densify_end] window; the log gets one record per step
    plus one per maintenance event.
    """
    if len(dataset) == 0:
        raise InvalidConfig("dataset is empty")
    if config.resolution is None:
        h, w = dataset[0][1].shape[:2]
        config.resolution = (w, h)
    rng = np.random.default_rng(config.seed)
    opt = OptimizerState(model)
    stats = atm_mod.ATMStats(model.num_parents,
                             model.config.children_per_parent) \
        if config.atm is not None else None
    log = []
    order = []
    for step in range(config.total_steps):
        if not order:
            order = list(rng.permutation(len(dataset)))
        cam, gt = dataset[order.pop()]
        w, h = warmup_resolution(step, config)
        if (w, h) != config.resolution:
            factor = config.resolution[0] // w
            gt_s = downscale_image(gt, factor)
        else:
            gt_s = gt
        value, info = train_step(model, opt, cam, gt_s, step, config, stats)
        record = {"step": step, "loss": value, "parents": info["parents"],
                  "splats": info["splats"]}
        if config.log_psnr_every and step % config.log_psnr_every == 0:
            record["psnr"] = info["psnr"]
        log.append(record)
        if (stats is not None and step > 0
                and config.densify_start <= step <= config.densify_end
                and step % config.densify_interval == 0):
            step_size = lr_at(step, "parent_position", config.lr_table,
                              config.total_steps)
            event = atm_mod.run_maintenance(model, stats, config.atm, opt,
                                            rng, step_size=step_size)
            event["step"] = step
            log.append(event)
    return model, log


def evaluate(model, dataset, background=(0.0, 0.0, 0.0)):
    """Render every view and report PSNR/SSIM per image plus means."""
    rows = []
    for cam, gt in dataset:
        img = render(model, cam, background).image
        rows.append({"psnr": psnr(img, gt), "ssim": ssim(img, gt)})
    mean_psnr = float(np.mean([r["psnr"] for r in rows])) if rows else 0.0
    mean_ssim = float(np.mean([r["ssim"] for r in rows])) if rows else 0.0
    return rows, {"psnr": mean_psnr, "ssim": mean_ssim}
