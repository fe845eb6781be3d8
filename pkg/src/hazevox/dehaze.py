"""Haze removal by opacity thresholding with automatic threshold selection.

Haze voxels are translucent; objects are nearly opaque. Sweeping a removal
threshold over the per-voxel opacity (quoted at the reference step
delta_ref) and comparing consecutive renders exposes three phases: heavy
change while haze vanishes, a plateau where little is left to remove, and
heavy change again once object voxels start to go. The selected threshold
sits where consecutive renders change least (max interval SSIM).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import PipelineError
from .fit import FitConfig, fit_grid
from .metrics import psnr, ssim
from .render import RenderConfig, render_views
from .scene import ImageBuffer, MultiViewDataset, VoxelGrid

DEFAULT_SWEEP = (0.005, 0.8, 32)  # geometric threshold spacing
PLATEAU_EPS_SSIM = 0.005


@dataclass(frozen=True)
class ThresholdSweep:
    """Inter-threshold render change curve over a fixed camera set.

    interval_psnr[k] / interval_ssim[k] compare the render sets at
    thresholds[k] and thresholds[k + 1]; gt_psnr / gt_ssim (optional)
    compare each threshold's renders against clean references.
    """

    thresholds: tuple
    interval_psnr: tuple
    interval_ssim: tuple
    gt_psnr: Optional[tuple] = None
    gt_ssim: Optional[tuple] = None

    def __post_init__(self):
        thr = tuple(float(t) for t in self.thresholds)
        if len(thr) < 2 or any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if len(self.interval_psnr) != len(thr) - 1 or len(self.interval_ssim) != len(thr) - 1:
            raise ValueError("need exactly one interval metric per threshold pair")
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "interval_psnr", tuple(float(v) for v in self.interval_psnr))
        object.__setattr__(self, "interval_ssim", tuple(float(v) for v in self.interval_ssim))
        for name in ("gt_psnr", "gt_ssim"):
            val = getattr(self, name)
            if val is not None:
                if len(val) != len(thr):
                    raise ValueError(f"{name} must have one value per threshold")
                object.__setattr__(self, name, tuple(float(v) for v in val))

    @property
    def n_intervals(self) -> int:
        return len(self.thresholds) - 1


@dataclass
class DehazeReport:
    """Outcome of one dehazing run."""

    selected_threshold: float
    selected_index: int
    phase_bounds: tuple  # (first, last) interval index of the plateau
    three_phase: bool
    fraction_removed: float
    fraction_high_opacity_removed: float
    per_view: list = field(default_factory=list)
    sweep: Optional[ThresholdSweep] = None

    def to_dict(self) -> dict:
        d = {
            "selected_threshold": self.selected_threshold,
            "selected_index": self.selected_index,
            "phase_bounds": list(self.phase_bounds),
            "three_phase": self.three_phase,
            "fraction_removed": self.fraction_removed,
            "fraction_high_opacity_removed": self.fraction_high_opacity_removed,
            "per_view": self.per_view,
        }
        if self.sweep is not None:
            d["sweep"] = {
                "thresholds": list(self.sweep.thresholds),
                "interval_psnr": list(self.sweep.interval_psnr),
                "interval_ssim": list(self.sweep.interval_ssim),
                "gt_psnr": list(self.sweep.gt_psnr) if self.sweep.gt_psnr else None,
                "gt_ssim": list(self.sweep.gt_ssim) if self.sweep.gt_ssim else None,
            }
        return d


def opacity(grid: VoxelGrid, delta_ref: float) -> np.ndarray:
    """Per-voxel opacity 1 - exp(-sigma * delta_ref)."""
    return 1.0 - np.exp(-grid.density.astype(np.float64) * delta_ref)


def remove_voxels(grid: VoxelGrid, threshold: float, delta_ref: float) -> VoxelGrid:
    """Zero the density of every voxel whose opacity is <= threshold.

    Colors are untouched (invisible at sigma = 0); voxels above the
    threshold are preserved exactly. Idempotent at fixed threshold.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    alpha = opacity(grid, delta_ref)
    density = np.where(alpha <= threshold, 0.0, grid.density).astype(np.float32)
    return grid.replace(density=density)


def sweep_thresholds(lo: float, hi: float, n: int) -> tuple:
    """Geometric threshold ladder over [lo, hi]."""
    if not (0 < lo < hi <= 1.0) or n < 2:
        raise ValueError("need 0 < lo < hi <= 1 and n >= 2")
    return tuple(np.geomspace(lo, hi, n).tolist())


def threshold_sweep(
    grid: VoxelGrid,
    cameras: Sequence,
    thresholds: Sequence[float],
    render_cfg: RenderConfig,
    delta_ref: float,
    gt_images: Optional[Sequence[ImageBuffer]] = None,
    threads: int = 1,
) -> ThresholdSweep:
    """Render the grid at every threshold and compare consecutive sets.

    Records the mean PSNR/SSIM between renders at neighboring thresholds
    (identical renders give the +inf PSNR sentinel) and, when gt_images
    are supplied, each threshold's mean metrics against them.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if len(thresholds) < 3:
        raise ValueError("need at least 3 thresholds")
    if gt_images is not None and len(gt_images) != len(cameras):
        raise ValueError("need one GT image per sweep camera")

    interval_psnr, interval_ssim = [], []
    gt_psnr = [] if gt_images is not None else None
    gt_ssim = [] if gt_images is not None else None
    prev = None
    for t in thresholds:
        cur = render_views(remove_voxels(grid, t, delta_ref), cameras, render_cfg, threads=threads)
        if gt_images is not None:
            gt_psnr.append(float(np.mean([psnr(r, g) for r, g in zip(cur, gt_images)])))
            gt_ssim.append(float(np.mean([ssim(r, g) for r, g in zip(cur, gt_images)])))
        if prev is not None:
            interval_psnr.append(float(np.mean([psnr(a, b) for a, b in zip(prev, cur)])))
            interval_ssim.append(float(np.mean([ssim(a, b) for a, b in zip(prev, cur)])))
        prev = cur
    return ThresholdSweep(
        thresholds=thresholds,
        interval_psnr=tuple(interval_psnr),
        interval_ssim=tuple(interval_ssim),
        gt_psnr=tuple(gt_psnr) if gt_psnr is not None else None,
        gt_ssim=tuple(gt_ssim) if gt_ssim is not None else None,
    )


def select_threshold(sweep: ThresholdSweep) -> tuple[float, tuple[int, int]]:
    """Pick the threshold where removal changes renders the least.

    Takes the interval with maximum SSIM (ties: higher interval PSNR,
    then lower threshold) and returns its lower threshold endpoint plus
    the plateau, the maximal contiguous run of intervals whose SSIM is
    within PLATEAU_EPS_SSIM of the maximum.
    """
    if sweep.n_intervals < 3:
        raise ValueError("sweep too coarse: need at least 3 intervals")
    ss = np.asarray(sweep.interval_ssim)
    ps = np.asarray(sweep.interval_psnr)
    best_ssim = ss.max()
    tied = np.flatnonzero(ss == best_ssim)
    if len(tied) > 1:
        best_psnr = ps[tied].max()
        tied = tied[ps[tied] == best_psnr]
    k = int(tied[0])
    lo = k
    while lo > 0 and ss[lo - 1] >= best_ssim - PLATEAU_EPS_SSIM:
        lo -= 1
    hi = k
    while hi < len(ss) - 1 and ss[hi + 1] >= best_ssim - PLATEAU_EPS_SSIM:
        hi += 1
    return sweep.thresholds[k], (lo, hi)


def global_compensate(hazy: ImageBuffer, dehazed: ImageBuffer) -> ImageBuffer:
    """Double the dehazing difference: clamp(2 * dehazed - hazy, 0, 1).

    Compensates global haze, where light crosses the medium both on the
    way to the subject and back to the camera; voxel removal only undoes
    the second pass.
    """
    if (hazy.height, hazy.width) != (dehazed.height, dehazed.width):
        raise ValueError("image dimensions differ")
    out = 2.0 * dehazed.pixels.astype(np.float64) - hazy.pixels.astype(np.float64)
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32))


def _sweep_camera_indices(n_views: int, max_cams: int = 4) -> list[int]:
    step = max(1, n_views // max_cams)
    return list(range(0, n_views, step))[:max_cams]


def dehaze_pipeline(
    dataset: MultiViewDataset,
    fit_cfg: FitConfig,
    render_cfg: RenderConfig,
    sweep_spec: tuple = DEFAULT_SWEEP,
    haze_class: str = "global",
    threads: int = 1,
    fitted_grid: Optional[VoxelGrid] = None,
):
    """End-to-end dehazing: fit, sweep, select, remove, re-render.

    haze_class "global" applies the double-difference compensation per
    view; "nonglobal" skips it. A pre-fitted grid can be passed to skip
    the fit stage. Returns (dehazed grid, DehazeReport, images) where
    images are the final per-view outputs for every dataset camera.
    """
    if haze_class not in ("global", "nonglobal"):
        raise ValueError("haze_class must be 'global' or 'nonglobal'")
    delta_ref = render_cfg.delta_ref

    stage = "fit"
    try:
        if fitted_grid is None:
            fitted_grid, _fit_report = fit_grid(dataset, fit_cfg, render_cfg)
        stage = "sweep"
        cams = dataset.cameras()
        sweep_cams = [cams[i] for i in _sweep_camera_indices(len(cams))]
        thresholds = sweep_thresholds(*sweep_spec)
        sweep = threshold_sweep(fitted_grid, sweep_cams, thresholds, render_cfg, delta_ref, threads=threads)
        stage = "select"
        selected, bounds = select_threshold(sweep)
        stage = "remove"
        alpha_before = opacity(fitted_grid, delta_ref)
        dehazed_grid = remove_voxels(fitted_grid, selected, delta_ref)
        removed = (fitted_grid.density > 0) & (dehazed_grid.density == 0)
        high = alpha_before > 0.5
        frac_removed = float(np.mean(removed))
        frac_high = float(np.mean(removed[high])) if high.any() else 0.0
        stage = "render"
        outputs = render_views(dehazed_grid, cams, render_cfg, threads=threads)
        if haze_class == "global":
            outputs = [global_compensate(img, out) for (_, img), out in zip(dataset.views, outputs)]
        stage = "report"
        before = render_views(fitted_grid, cams, render_cfg, threads=threads)
        per_view = []
        for i, ((_, img), ren_before, ren_after) in enumerate(zip(dataset.views, before, outputs)):
            per_view.append(
                {
                    "view": i,
                    "psnr_recon_vs_input": psnr(ren_before, img),
                    "ssim_recon_vs_input": ssim(ren_before, img),
                    "psnr_dehazed_vs_input": psnr(ren_after, img),
                    "ssim_dehazed_vs_input": ssim(ren_after, img),
                }
            )
    except Exception as exc:
        if isinstance(exc, PipelineError):
            raise
        raise PipelineError(stage, exc) from exc

    k = sweep.thresholds.index(selected)
    report = DehazeReport(
        selected_threshold=selected,
        selected_index=k,
        phase_bounds=bounds,
        three_phase=bounds[0] > 0 and bounds[1] < sweep.n_intervals - 1,
        fraction_removed=frac_removed,
        fraction_high_opacity_removed=frac_high,
        per_view=per_view,
        sweep=sweep,
    )
    return dehazed_grid, report, outputs
