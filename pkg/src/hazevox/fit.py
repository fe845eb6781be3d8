"""Fit a voxel grid to posed views by gradient descent on photometric loss.

The field is an explicit dense grid (no spatial encoding); density goes
through a softplus positivity map and color through a sigmoid, and both
are optimized with Adam under a coarse-to-fine resolution schedule.
Gradients of the compositing quadrature are analytic (derived from the
transmittance telescoping), checked against central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientViewsError, NumericalError
from .render import RenderConfig, march_fields, render_image
from .scene import (
    MultiViewDataset,
    Ray,
    VoxelGrid,
    camera_ray_grid,
    corner_flat_index_and_weight,
    trilinear_resample,
)
from . import metrics


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameters of the grid fit.

    grid_schedule lists coarse-to-fine resolutions (ints mean cubes); the
    last entry is the output resolution. stage_fractions optionally splits
    the iteration budget, otherwise later (finer) stages get more.
    """

    iterations: int = 3000
    batch_rays: int = 4096
    lr_density: float = 0.25
    lr_color: float = 0.1
    grid_schedule: tuple = (16, 32, 64)
    stage_fractions: Optional[tuple] = None
    loss: str = "mse"
    seed: int = 0
    holdout_views: int = 0
    checkpoint_every: int = 250
    tv_weight: float = 0.0
    init_opacity: float = 0.01
    bbox_min: Optional[tuple] = None
    bbox_max: Optional[tuple] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_density <= 0 or self.lr_color <= 0:
            raise ValueError("learning rates must be positive")
        if self.loss != "mse":
            raise ValueError("only 'mse' loss is supported")
        if not 0 < self.init_opacity < 1:
            raise ValueError("init_opacity must be in (0, 1)")
        schedule = tuple(
            (int(d),) * 3 if np.isscalar(d) else tuple(int(x) for x in d)
            for d in self.grid_schedule
        )
        if not schedule:
            raise ValueError("grid_schedule must not be empty")
        object.__setattr__(self, "grid_schedule", schedule)


@dataclass
class FitReport:
    """Checkpointed losses/metrics plus final grid statistics."""

    checkpoints: list = field(default_factory=list)
    wall_time_sec: float = 0.0
    n_train_rays: int = 0
    holdout_indices: tuple = ()
    final_dims: tuple = ()
    frac_alpha_above_001: float = 0.0

    def to_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "wall_time_sec": self.wall_time_sec,
            "n_train_rays": self.n_train_rays,
            "holdout_indices": list(self.holdout_indices),
            "final_dims": list(self.final_dims),
            "frac_alpha_above_001": self.frac_alpha_above_001,
        }


# ---------------------------------------------------------------------------
# Loss and analytic gradients
# ---------------------------------------------------------------------------

def _unpack_batch(ray_batch):
    rays, targets = [], []
    for ray, target in ray_batch:
        rays.append(ray)
        targets.append(np.asarray(target, dtype=np.float64).reshape(3))
    if not rays:
        raise ValueError("empty batch")
    o = np.stack([r.origin for r in rays])
    d = np.stack([r.direction for r in rays])
    t0 = np.array([r.t_near for r in rays])
    t1 = np.array([r.t_far for r in rays])
    return o, d, t0, t1, np.stack(targets)


def _forward_backward(dims, bbox_min, bbox_max, fields, o, d, t0, t1, targets, cfg, want_grad=True):
    """Shared MSE forward (+ analytic backward) against raw field rows.

    Returns (loss, grad_fields) with grad_fields of shape (V, 4) in the
    dtype of ``fields`` (None when want_grad is False).
    """
    dtype = fields.dtype
    colors, aux = march_fields(dims, bbox_min, bbox_max, fields, o, d, t0, t1, cfg, want_aux=True)
    resid = colors - targets.astype(dtype)
    loss = float(np.mean(resid ** 2))
    if not want_grad:
        return loss, None

    n_rays, n = aux["sigma"].shape
    gbar = (2.0 / resid.size) * resid  # dLoss/dColor, (R, 3)
    weight = aux["weight"]
    rgb = aux["rgb"]
    trans = aux["trans"]
    delta = aux["delta"]
    bg = np.asarray(cfg.background, dtype=dtype)

    # dC/dc_k = w_k; dC/dsigma_k = delta * (T_{k+1} c_k - S_k) where S_k is
    # the radiance accumulated behind sample k (suffix weights + background).
    grad_c = weight[:, :, None] * gbar[:, None, :]
    wc = weight[:, :, None] * rgb
    suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc + trans[:, -1:, None] * bg
    inner = trans[:, 1:, None] * rgb - suffix
    grad_sig = delta[:, None] * np.einsum("rnc,rc->rn", inner, gbar)

    flat_n = n_rays * n
    inside = aux["inside"]
    gs = grad_sig.reshape(flat_n).copy()
    gc = grad_c.reshape(flat_n, 3).copy()
    gs[~inside] = 0.0
    gc[~inside] = 0.0

    i0, frac = aux["i0"], aux["frac"]
    idx8 = np.empty(8 * flat_n, dtype=np.int64)
    wt8 = np.empty(8 * flat_n, dtype=dtype)
    for c in range(8):
        idx, w = corner_flat_index_and_weight(c, i0, frac, dims)
        idx8[c * flat_n : (c + 1) * flat_n] = idx
        wt8[c * flat_n : (c + 1) * flat_n] = w
    n_vox = fields.shape[0]
    grad_fields = np.empty((n_vox, 4), dtype=dtype)
    grad_fields[:, 0] = np.bincount(idx8, weights=wt8 * np.tile(gs, 8), minlength=n_vox)
    for ch in range(3):
        grad_fields[:, ch + 1] = np.bincount(
            idx8, weights=wt8 * np.tile(gc[:, ch], 8), minlength=n_vox
        )
    return loss, grad_fields


def photometric_loss(grid: VoxelGrid, ray_batch, cfg: RenderConfig) -> float:
    """Mean squared RGB error between composited rays and their targets.

    ray_batch: iterable of (Ray, target rgb) pairs; must be non-empty.
    """
    o, d, t0, t1, targets = _unpack_batch(ray_batch)
    fields = np.empty((grid.n_voxels, 4), dtype=np.float64)
    fields[:, 0] = grid.density.reshape(-1)
    fields[:, 1:] = grid.color.reshape(-1, 3)
    loss, _ = _forward_backward(
        grid.dims, grid.bbox_min, grid.bbox_max, fields, o, d, t0, t1, targets, cfg, want_grad=False
    )
    return loss


def loss_gradients(grid: VoxelGrid, ray_batch, cfg: RenderConfig):
    """Analytic d(photometric_loss)/d(sigma, color) for every voxel.

    Voxels untouched by any ray in the batch get exactly zero gradient.
    Returns (grad_density (nx,ny,nz), grad_color (nx,ny,nz,3)), float64.
    """
    o, d, t0, t1, targets = _unpack_batch(ray_batch)
    fields = np.empty((grid.n_voxels, 4), dtype=np.float64)
    fields[:, 0] = grid.density.reshape(-1)
    fields[:, 1:] = grid.color.reshape(-1, 3)
    _, grad = _forward_backward(
        grid.dims, grid.bbox_min, grid.bbox_max, fields, o, d, t0, t1, targets, cfg
    )
    return grad[:, 0].reshape(grid.dims), grad[:, 1:].reshape(grid.dims + (3,))


# ---------------------------------------------------------------------------
# Parameterization and optimizer
# ---------------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20.0, y, np.log(np.expm1(np.maximum(y, 1e-12))))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


class Adam:
    """Per-array Adam with bias correction."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict = {}

    def step(self, name, param, grad, lr):
        m, v, t = self.state.get(name, (np.zeros_like(param), np.zeros_like(param), 0))
        t += 1
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        self.state[name] = (m, v, t)
        mhat = m / (1 - self.beta1 ** t)
        vhat = v / (1 - self.beta2 ** t)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)


def tv_gradient(sigma: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared neighbor-difference energy of a density volume."""
    grad = np.zeros_like(sigma)
    energy = 0.0
    n_pairs = sum(sigma.size - sigma.size // sigma.shape[a] for a in range(3))
    for axis in range(3):
        d = np.diff(sigma, axis=axis)
        energy += float(np.sum(d * d))
        g = (2.0 / n_pairs) * d
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        grad[tuple(lo)] -= g
        grad[tuple(hi)] += g
    return energy / n_pairs, grad


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _holdout_split(n_views: int, k: int):
    if k <= 0:
        return [], list(range(n_views))
    held = sorted({int((j + 0.5) * n_views / k) for j in range(k)})
    train = [i for i in range(n_views) if i not in held]
    return held, train


def _collect_rays(dataset, view_indices, bbox_min, bbox_max):
    os_, ds_, t0_, t1_, tg_ = [], [], [], [], []
    for i in view_indices:
        cam, img = dataset.views[i]
        o, d, t0, t1 = camera_ray_grid(cam, bbox_min, bbox_max)
        keep = t1 > t0
        os_.append(o[keep])
        ds_.append(d[keep])
        t0_.append(t0[keep])
        t1_.append(t1[keep])
        tg_.append(img.pixels.reshape(-1, 3)[keep])
    f32 = np.float32
    return (
        np.concatenate(os_).astype(f32),
        np.concatenate(ds_).astype(f32),
        np.concatenate(t0_).astype(f32),
        np.concatenate(t1_).astype(f32),
        np.concatenate(tg_).astype(f32),
    )


def _resolve_bbox(dataset, cfg: FitConfig):
    if cfg.bbox_min is not None and cfg.bbox_max is not None:
        return np.asarray(cfg.bbox_min, float), np.asarray(cfg.bbox_max, float)
    if dataset.gt_grid is not None:
        return dataset.gt_grid.bbox_min, dataset.gt_grid.bbox_max
    meta = dataset.metadata
    if "bbox_min" in meta and "bbox_max" in meta:
        return np.asarray(meta["bbox_min"], float), np.asarray(meta["bbox_max"], float)
    return np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])


def grid_from_parameters(theta_sigma, theta_color, bbox_min, bbox_max) -> VoxelGrid:
    dims = theta_sigma.shape
    return VoxelGrid(
        dims=dims,
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        density=softplus(theta_sigma.astype(np.float64)).astype(np.float32),
        color=sigmoid(theta_color.astype(np.float64)).astype(np.float32),
    )


def _stage_iterations(cfg: FitConfig):
    n_stages = len(cfg.grid_schedule)
    if cfg.stage_fractions is not None:
        fr = np.asarray(cfg.stage_fractions, dtype=np.float64)
        if len(fr) != n_stages:
            raise ValueError("stage_fractions length must match grid_schedule")
    else:
        fr = np.array([1.8 ** i for i in range(n_stages)])
    fr = fr / fr.sum()
    iters = np.maximum(1, np.round(fr * cfg.iterations).astype(int))
    iters[-1] += cfg.iterations - iters.sum()
    return np.maximum(iters, 1)


def fit_grid(
    dataset: MultiViewDataset,
    fit_cfg: FitConfig,
    render_cfg: RenderConfig,
) -> tuple[VoxelGrid, FitReport]:
    """Reconstruct a voxel grid from a posed multi-view dataset.

    Deterministic for a fixed (dataset, FitConfig) in sequential mode.
    Raises InsufficientViewsError below 2 training views and
    NumericalError (with the last checkpoint attached) on divergence.
    """
    t_start = time.perf_counter()
    if len(dataset) < 2:
        raise InsufficientViewsError("insufficient views: need at least 2")
    held, train = _holdout_split(len(dataset), fit_cfg.holdout_views)
    if len(train) < 2:
        raise InsufficientViewsError("insufficient views: fewer than 2 left after holdout")
    bbox_min, bbox_max = _resolve_bbox(dataset, fit_cfg)

    o, d, t0, t1, targets = _collect_rays(dataset, train, bbox_min, bbox_max)
    n_rays = len(o)
    if n_rays == 0:
        raise InsufficientViewsError("insufficient views: no rays intersect the fit bbox")
    rng = np.random.default_rng(fit_cfg.seed)
    report = FitReport(n_train_rays=n_rays, holdout_indices=tuple(held))

    delta_ref = render_cfg.delta_ref
    sigma0 = -np.log1p(-fit_cfg.init_opacity) / delta_ref
    theta_sigma = None
    theta_color = None
    stage_iters = _stage_iterations(fit_cfg)
    final_dims = fit_cfg.grid_schedule[-1]
    global_it = 0
    ema_loss = None
    last_checkpoint = None

    def checkpoint(stage_dims, force=False):
        nonlocal last_checkpoint
        if not force and (global_it % fit_cfg.checkpoint_every) != 0:
            return
        entry = {
            "iteration": global_it,
            "stage_dims": list(stage_dims),
            "loss": ema_loss,
            "train_psnr": float(-10.0 * np.log10(max(ema_loss, 1e-12))) if ema_loss else None,
        }
        if held:
            grid = grid_from_parameters(theta_sigma, theta_color, bbox_min, bbox_max)
            ps, ss = [], []
            for i in held:
                cam, img = dataset.views[i]
                ren = render_image(grid, cam, render_cfg)
                ps.append(metrics.psnr(ren, img))
                ss.append(metrics.ssim(ren, img))
            entry["holdout_psnr"] = float(np.mean(ps))
            entry["holdout_ssim"] = float(np.mean(ss))
        report.checkpoints.append(entry)
        last_checkpoint = entry

    for stage, (dims, iters) in enumerate(zip(fit_cfg.grid_schedule, stage_iters)):
        if theta_sigma is None:
            theta_sigma = np.full(dims, softplus_inv(sigma0), dtype=np.float32)
            theta_color = np.zeros(dims + (3,), dtype=np.float32)
        else:
            theta_sigma = trilinear_resample(theta_sigma, theta_sigma.shape, dims)
            theta_color = trilinear_resample(theta_color, theta_color.shape[:3], dims)
        n_samples = max(32, int(round(render_cfg.samples_per_ray * max(dims) / max(final_dims))))
        stage_cfg = replace(render_cfg, samples_per_ray=n_samples)
        opt = Adam()
        n_vox = int(np.prod(dims))
        batch = min(fit_cfg.batch_rays, n_rays)
        perm = rng.permutation(n_rays)
        pos = 0

        for _ in range(int(iters)):
            if pos + batch > n_rays:
                perm = rng.permutation(n_rays)
                pos = 0
            idx = perm[pos : pos + batch]
            pos += batch

            sig = softplus(theta_sigma.astype(np.float64)).astype(np.float32)
            col = sigmoid(theta_color.astype(np.float64)).astype(np.float32)
            fields = np.empty((n_vox, 4), dtype=np.float32)
            fields[:, 0] = sig.reshape(-1)
            fields[:, 1:] = col.reshape(-1, 3)
            loss, grad_fields = _forward_backward(
                dims, bbox_min, bbox_max, fields,
                o[idx], d[idx], t0[idx], t1[idx], targets[idx], stage_cfg,
            )
            if not np.isfinite(loss):
                raise NumericalError(
                    f"loss diverged (non-finite) at iteration {global_it}",
                    last_checkpoint=last_checkpoint,
                )
            grad_sigma = grad_fields[:, 0].reshape(dims)
            grad_color = grad_fields[:, 1:].reshape(dims + (3,))
            if fit_cfg.tv_weight > 0:
                _, tv_g = tv_gradient(sig)
                grad_sigma = grad_sigma + fit_cfg.tv_weight * tv_g
            # chain rule through softplus / sigmoid
            grad_ts = grad_sigma * sigmoid(theta_sigma)
            grad_tc = grad_color * (col * (1.0 - col))
            theta_sigma = opt.step("sigma", theta_sigma, grad_ts.astype(np.float32), fit_cfg.lr_density)
            theta_color = opt.step("color", theta_color, grad_tc.astype(np.float32), fit_cfg.lr_color)

            ema_loss = loss if ema_loss is None else 0.95 * ema_loss + 0.05 * loss
            global_it += 1
            checkpoint(dims)

    checkpoint(final_dims, force=True)
    grid = grid_from_parameters(theta_sigma, theta_color, bbox_min, bbox_max)
    alpha = 1.0 - np.exp(-grid.density * delta_ref)
    report.frac_alpha_above_001 = float(np.mean(alpha > 0.01))
    report.final_dims = tuple(final_dims)
    report.wall_time_sec = time.perf_counter() - t_start
    return grid, report
