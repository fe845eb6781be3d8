"""hazevox: voxel radiance field reconstruction and haze removal.

Reconstructs an explicit (density, color) voxel grid from posed
multi-view images by differentiable volume rendering, removes haze by
deleting low-opacity voxels under an automatically selected threshold,
and re-renders haze-free views. Ships with a procedural scene and haze
synthesizer plus the PSNR / SSIM / CIEDE2000 metric suite used to
validate the pipeline.
"""

__version__ = "0.1.0"

from .scene import (
    CameraModel,
    ImageBuffer,
    MultiViewDataset,
    Ray,
    VoxelGrid,
    grid_sample,
    make_camera_ray,
)
from .render import (
    RayTrace,
    RenderConfig,
    analytic_transmittance,
    composite_ray,
    render_image,
    rte_reference_radiance,
)
from .synthesis import (
    BaselineHazeParams,
    HazeField,
    SceneSpec,
    absorption_attenuate,
    bake_steady_state,
    baseline_haze_2d,
    inject_haze,
    iterate_scatter,
    make_haze_field,
    make_procedural_scene,
    steady_state_gain,
)
from .fit import FitConfig, FitReport, fit_grid, loss_gradients, photometric_loss
from .dehaze import (
    DehazeReport,
    ThresholdSweep,
    dehaze_pipeline,
    global_compensate,
    remove_voxels,
    select_threshold,
    threshold_sweep,
)
from .metrics import MetricTriple, ciede2000, psnr, ssim
from .fileio import read_dataset, read_grid, write_dataset, write_grid

__all__ = [
    "BaselineHazeParams",
    "CameraModel",
    "DehazeReport",
    "FitConfig",
    "FitReport",
    "HazeField",
    "ImageBuffer",
    "MetricTriple",
    "MultiViewDataset",
    "Ray",
    "RayTrace",
    "RenderConfig",
    "SceneSpec",
    "ThresholdSweep",
    "VoxelGrid",
    "absorption_attenuate",
    "analytic_transmittance",
    "bake_steady_state",
    "baseline_haze_2d",
    "ciede2000",
    "composite_ray",
    "dehaze_pipeline",
    "fit_grid",
    "global_compensate",
    "grid_sample",
    "inject_haze",
    "iterate_scatter",
    "loss_gradients",
    "make_camera_ray",
    "make_haze_field",
    "make_procedural_scene",
    "photometric_loss",
    "psnr",
    "read_dataset",
    "read_grid",
    "remove_voxels",
    "render_image",
    "rte_reference_radiance",
    "select_threshold",
    "ssim",
    "steady_state_gain",
    "threshold_sweep",
    "write_dataset",
    "write_grid",
]
