"""Procedural scenes, haze media, and hazy/clean dataset synthesis.

The haze medium follows the scattering decomposition into absorption,
out-scattering, emission, and in-scattering. Multiple scattering is not
simulated bounce by bounce: successive orders decay geometrically, so the
converged steady state folds them into a single gain of 1 / (1 - f_ms)
applied to the ambient in-scatter. Haze injection bakes that steady state
into voxel colors, which is exactly the field the reconstruction stage is
supposed to recover and the dehazing stage to strip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .scene import CameraModel, ImageBuffer, VoxelGrid, look_at_pose

EPS_OPACITY_RANGE = (0.01, 0.2)  # recommended per-voxel haze opacity at delta_ref


def opacity_to_sigma(alpha: float, delta_ref: float) -> float:
    """Density that produces opacity ``alpha`` over one reference step."""
    if not 0 <= alpha < 1:
        raise ValueError("opacity must be in [0, 1)")
    return -math.log1p(-alpha) / delta_ref


def sigma_to_opacity(sigma, delta_ref: float):
    return 1.0 - np.exp(-np.asarray(sigma) * delta_ref)


# ---------------------------------------------------------------------------
# Scattering primitives
# ---------------------------------------------------------------------------

def absorption_attenuate(l0, sigma_a: float, distance: float) -> np.ndarray:
    """Attenuate radiance through a homogeneous absorber.

    Solves dL/dx = -sigma_a * L over ``distance``: L0 * exp(-sigma_a * d).
    """
    if sigma_a < 0 or distance < 0:
        raise ValueError("sigma_a and distance must be >= 0")
    return np.asarray(l0, dtype=np.float64) * math.exp(-sigma_a * distance)


def iterate_scatter(g0: float, f_ms: float, n: int) -> float:
    """Partial sum of the scattering-order recursion G_{k+1} = G_k * f_ms.

    Returns g0 * sum(f_ms**k for k in 0..n).
    """
    if not 0 <= f_ms < 1:
        raise ValueError("series diverges: f_ms must be in [0, 1)")
    if n < 0:
        raise ValueError("n must be >= 0")
    if f_ms == 0:
        return float(g0)
    return float(g0) * (1.0 - f_ms ** (n + 1)) / (1.0 - f_ms)


def steady_state_gain(f_ms: float) -> float:
    """Converged multiple-scattering gain 1 + f + f^2 + ... = 1/(1 - f)."""
    if not 0 <= f_ms < 1:
        raise ValueError("series diverges: f_ms must be in [0, 1)")
    return 1.0 / (1.0 - f_ms)


# ---------------------------------------------------------------------------
# Haze media
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformProfile:
    kind: str = "uniform"

    def scale_at(self, pts):
        return np.ones(len(pts), dtype=np.float64)

    def line_integral(self, p0, p1) -> float:
        return float(np.linalg.norm(np.asarray(p1, float) - np.asarray(p0, float)))


@dataclass(frozen=True)
class HeightExponentialProfile:
    """Density falls off as exp(-falloff * (z - base_z)) above base height."""

    falloff: float
    base_z: float = -1.0
    kind: str = "height-exponential"

    def __post_init__(self):
        if not (np.isfinite(self.falloff) and self.falloff > 0):
            raise ValueError("falloff must be finite and positive")

    def scale_at(self, pts):
        z = np.asarray(pts, dtype=np.float64)[:, 2]
        return np.exp(-self.falloff * (z - self.base_z))

    def line_integral(self, p0, p1) -> float:
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        length = float(np.linalg.norm(p1 - p0))
        if length == 0:
            return 0.0
        mz = (p1[2] - p0[2]) / length
        head = math.exp(-self.falloff * (p0[2] - self.base_z))
        if abs(mz) < 1e-12:
            return head * length
        k = self.falloff * mz
        return head * (1.0 - math.exp(-k * length)) / k


@dataclass(frozen=True)
class LocalBlobProfile:
    """Compactly supported bump: (1 - (d/radius)^2)^2 inside, 0 outside."""

    center: tuple
    radius: float
    kind: str = "local-blob"

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("blob radius must be finite and positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def scale_at(self, pts):
        d2 = np.sum((np.asarray(pts, float) - np.asarray(self.center)) ** 2, axis=-1)
        q = 1.0 - d2 / (self.radius ** 2)
        return np.where(q > 0, q * q, 0.0)

    def line_integral(self, p0, p1) -> float:
        raise ValueError("unsupported profile: local-blob has no analytic line integral")


@dataclass(frozen=True)
class HazeField:
    """Parametric participating medium.

    sigma_a / sigma_s are the peak absorption and out-scattering
    coefficients (1/world-length); the spatial profile scales both, so
    sigma_t(x) = (sigma_a + sigma_s) * profile(x) everywhere. emission is
    the medium's source color L_e and f_ms the per-order multiple
    scattering retention.
    """

    sigma_a: float
    sigma_s: float
    emission: tuple = (1.0, 1.0, 1.0)
    f_ms: float = 0.0
    profile: object = field(default_factory=UniformProfile)

    def __post_init__(self):
        if self.sigma_a < 0 or self.sigma_s < 0:
            raise ValueError("sigma_a and sigma_s must be >= 0")
        if not 0 <= self.f_ms < 1:
            raise ValueError("f_ms must be in [0, 1)")
        object.__setattr__(self, "emission", tuple(float(c) for c in self.emission))

    @property
    def sigma_t(self) -> float:
        return self.sigma_a + self.sigma_s

    def sigma_t_at(self, pts):
        return self.sigma_t * self.profile.scale_at(pts)

    def sigma_a_at(self, pts):
        return self.sigma_a * self.profile.scale_at(pts)

    def sigma_s_at(self, pts):
        return self.sigma_s * self.profile.scale_at(pts)

    def optical_depth(self, p0, p1) -> float:
        """Exact integral of sigma_t along the segment p0 -> p1."""
        return self.sigma_t * self.profile.line_integral(p0, p1)

    def steady_in_scatter(self, ambient) -> np.ndarray:
        """Steady-state in-scattered radiance for an isotropic ambient field."""
        amb = np.asarray(ambient, dtype=np.float64)
        return steady_state_gain(self.f_ms) * amb * np.asarray(self.emission)

    def steady_color(self, ambient) -> np.ndarray:
        """steady_in_scatter clamped into the voxel color range."""
        return np.clip(self.steady_in_scatter(ambient), 0.0, 1.0)


def make_haze_field(kind: str, params: dict, seed: int = 0) -> HazeField:
    """Build a haze field of one of the supported kinds.

    kinds: "uniform" (global uniform haze), "height-exponential" (global
    non-uniform), "local-blob" (non-global). params always accepts
    sigma_a, sigma_s, emission, f_ms; height-exponential adds falloff and
    base_z, local-blob adds radius, peak (sigma_t at center) and an
    optional center (randomized from the seed when omitted).
    """
    params = dict(params)
    common = {
        "emission": tuple(params.pop("emission", (1.0, 1.0, 1.0))),
        "f_ms": float(params.pop("f_ms", 0.0)),
    }
    if kind == "uniform":
        fld = HazeField(
            sigma_a=float(params.pop("sigma_a", 0.0)),
            sigma_s=float(params.pop("sigma_s", 0.0)),
            profile=UniformProfile(),
            **common,
        )
    elif kind == "height-exponential":
        profile = HeightExponentialProfile(
            falloff=float(params.pop("falloff")),
            base_z=float(params.pop("base_z", -1.0)),
        )
        fld = HazeField(
            sigma_a=float(params.pop("sigma_a", 0.0)),
            sigma_s=float(params.pop("sigma_s", 0.0)),
            profile=profile,
            **common,
        )
    elif kind == "local-blob":
        peak = float(params.pop("peak"))
        if peak < 0:
            raise ValueError("blob peak must be >= 0")
        center = params.pop("center", None)
        if center is None:
            rng = np.random.default_rng(seed)
            center = tuple(rng.uniform(-0.45, 0.45, size=3))
        # Split the peak between absorption and scattering by albedo.
        albedo = float(params.pop("albedo", 0.5))
        if not 0 <= albedo <= 1:
            raise ValueError("albedo must be in [0, 1]")
        fld = HazeField(
            sigma_a=peak * (1.0 - albedo),
            sigma_s=peak * albedo,
            profile=LocalBlobProfile(center=center, radius=float(params.pop("radius"))),
            **common,
        )
    else:
        raise ValueError(f"invalid haze kind {kind!r}")
    if params:
        raise ValueError(f"unknown haze params: {sorted(params)}")
    return fld


# ---------------------------------------------------------------------------
# Grid-level haze operations
# ---------------------------------------------------------------------------

def inject_haze(clean: VoxelGrid, haze: HazeField, ambient, delta_ref: float) -> VoxelGrid:
    """Combine a clean grid with a haze medium into one steady-state grid.

    Densities add (sigma' = sigma_clean + sigma_haze at each voxel center);
    colors blend emission-weighted toward the haze steady-state color.
    Vacuum haze is the identity. delta_ref is only used to sanity-check
    that the haze opacity lands in the recommended per-voxel range.
    """
    if isinstance(haze.profile, LocalBlobProfile):
        c = np.asarray(haze.profile.center)
        r = haze.profile.radius
        if np.any(c + r < clean.bbox_min) or np.any(c - r > clean.bbox_max):
            raise ValueError("haze bbox mismatch: blob support outside grid bounds")
    centers = clean.voxel_centers().reshape(-1, 3)
    sigma_h = haze.sigma_t_at(centers).astype(np.float64)
    if np.any(sigma_h > 0):
        peak_alpha = float(np.max(sigma_to_opacity(sigma_h, delta_ref)))
        if not (EPS_OPACITY_RANGE[0] * 0.1 <= peak_alpha <= EPS_OPACITY_RANGE[1] * 2.5):
            import warnings

            warnings.warn(
                f"haze opacity {peak_alpha:.3f} at delta_ref outside the "
                f"recommended {EPS_OPACITY_RANGE} range",
                stacklevel=2,
            )
    sigma_c = clean.density.reshape(-1).astype(np.float64)
    total = sigma_c + sigma_h
    c_haze = haze.steady_color(ambient)
    cols = clean.color.reshape(-1, 3).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        blended = (sigma_c[:, None] * cols + sigma_h[:, None] * c_haze) / total[:, None]
    blended = np.where(total[:, None] > 0, blended, cols)
    return clean.replace(
        density=total.reshape(clean.dims).astype(np.float32),
        color=np.clip(blended, 0.0, 1.0).reshape(clean.dims + (3,)).astype(np.float32),
    )


def bake_steady_state(haze: HazeField, ambient, dims, bbox_min, bbox_max) -> VoxelGrid:
    """Bake a pure haze medium into an equivalent renderable grid.

    Voxel density is sigma_t and voxel color the normalized source term
    (sigma_a * L_e + sigma_s * L_i) / sigma_t, which makes the discrete
    compositing integrate exactly the same radiance as the continuous
    reference ``rte_reference_radiance``.
    """
    grid = VoxelGrid.empty(dims, bbox_min, bbox_max)
    centers = grid.voxel_centers().reshape(-1, 3)
    sig_t = haze.sigma_t_at(centers)
    sig_a = haze.sigma_a_at(centers)
    sig_s = haze.sigma_s_at(centers)
    l_e = np.asarray(haze.emission, dtype=np.float64)
    l_i = haze.steady_in_scatter(ambient)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = (sig_a[:, None] * l_e + sig_s[:, None] * l_i) / sig_t[:, None]
    color = np.where(sig_t[:, None] > 0, color, 0.0)
    return grid.replace(
        density=sig_t.reshape(grid.dims).astype(np.float32),
        color=np.clip(color, 0.0, 1.0).reshape(grid.dims + (3,)).astype(np.float32),
    )


# ---------------------------------------------------------------------------
# Baseline 2D haze model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineHazeParams:
    """Depth-based 2D haze: I = R * t + L * (1 - t), t = exp(-beta * d)."""

    beta: float
    airlight: tuple
    depth: np.ndarray  # (H, W) world units, > 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2 or not np.all(np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("depth map must be a finite positive (H, W) array")
        object.__setattr__(self, "airlight", tuple(float(c) for c in self.airlight))
        object.__setattr__(self, "depth", d)


def baseline_haze_2d(clean: ImageBuffer, params: BaselineHazeParams) -> ImageBuffer:
    """Apply the classic transmission-map haze model to a clean image."""
    if params.depth.shape != (clean.height, clean.width):
        raise ValueError("depth map does not match image dimensions")
    t = np.exp(-params.beta * params.depth)[..., None]
    airlight = np.asarray(params.airlight, dtype=np.float64)
    hazy = clean.pixels * t + airlight * (1.0 - t)
    return ImageBuffer(hazy.astype(np.float32))


# ---------------------------------------------------------------------------
# Procedural scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for a textured primitive scene + camera array.

    The same seed always produces the same grid and poses. Primitives are
    rasterized as one-voxel shells with busy procedural textures; object
    voxels are near-opaque (optical depth >= 5 over one voxel step).
    """

    seed: int = 0
    n_boxes: int = 3
    n_spheres: int = 2
    ground_plane: bool = False
    texture_frequency: float = 6.0
    grid_dims: tuple = (64, 64, 64)
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)
    camera_kind: str = "ring"  # or "grid"
    n_cameras: int = 20
    camera_radius: float = 2.9
    elevations_deg: tuple = (22.0, -14.0)
    image_size: tuple = (64, 64)
    fov_deg: float = 64.0

    def __post_init__(self):
        if self.camera_kind not in ("ring", "grid"):
            raise ValueError("camera_kind must be 'ring' or 'grid'")
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")


_PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.65, 0.85],
        [0.90, 0.75, 0.20],
        [0.30, 0.80, 0.35],
        [0.80, 0.35, 0.80],
        [0.95, 0.55, 0.25],
        [0.35, 0.40, 0.90],
        [0.70, 0.85, 0.30],
    ]
)


def _stripe_texture(pts, base, alt, freq, direction, phase):
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * (pts @ direction) + phase)
    return base * wave[:, None] + alt * (1.0 - wave[:, None])


def _checker_texture(pts, base, alt, freq):
    cells = np.floor(pts * freq).astype(np.int64).sum(axis=1)
    parity = (cells % 2).astype(np.float64)[:, None]
    return base * parity + alt * (1.0 - parity)


def make_procedural_scene(spec: SceneSpec) -> tuple[VoxelGrid, list[CameraModel]]:
    """Generate a textured shell-primitive grid and its camera array.

    Raises ValueError("scene too dense") when primitives occupy more than
    90% of the bbox.
    """
    rng = np.random.default_rng(spec.seed)
    grid = VoxelGrid.empty(spec.grid_dims, spec.bbox_min, spec.bbox_max)
    centers = grid.voxel_centers().reshape(-1, 3)
    cell = float(np.min(grid.voxel_size))
    sigma_obj = 6.0 / cell  # per-voxel optical depth 6: opaque shell
    shell = 0.55 * cell

    density = np.zeros(len(centers), dtype=np.float64)
    color = np.zeros((len(centers), 3), dtype=np.float64)

    # Rejection-sampled primitive placement; keeps surfaces separated so
    # every shell voxel stays visible from the camera array.
    extent = np.asarray(spec.bbox_max, float) - np.asarray(spec.bbox_min, float)
    core_min = np.asarray(spec.bbox_min, float) + 0.24 * extent
    core_max = np.asarray(spec.bbox_max, float) - 0.24 * extent
    placed: list[tuple[np.ndarray, float]] = []

    def place(radius):
        for _ in range(200):
            c = rng.uniform(core_min, core_max)
            if all(np.linalg.norm(c - pc) > radius + pr + 0.1 for pc, pr in placed):
                placed.append((c, radius))
                return c
        raise ValueError("scene too dense")

    def paint(mask, texture):
        density[mask] = sigma_obj
        color[mask] = np.clip(texture, 0.02, 1.0)

    for b in range(spec.n_boxes):
        half = rng.uniform(0.10, 0.22, size=3)
        c = place(float(np.linalg.norm(half)))
        d_axis = np.abs(centers - c) - half
        sdf = np.linalg.norm(np.maximum(d_axis, 0.0), axis=1) + np.minimum(
            d_axis.max(axis=1), 0.0
        )
        mask = np.abs(sdf) <= shell
        base = _PALETTE[rng.integers(len(_PALETTE))]
        alt = _PALETTE[rng.integers(len(_PALETTE))] * 0.4
        if b % 2 == 0:
            tex = _checker_texture(centers[mask], base, alt, spec.texture_frequency)
        else:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            tex = _stripe_texture(
                centers[mask], base, alt, spec.texture_frequency, direction, rng.uniform(0, 2 * np.pi)
            )
        paint(mask, tex)

    for _ in range(spec.n_spheres):
        radius = rng.uniform(0.14, 0.26)
        c = place(radius)
        sdf = np.linalg.norm(centers - c, axis=1) - radius
        mask = np.abs(sdf) <= shell
        base = _PALETTE[rng.integers(len(_PALETTE))]
        alt = _PALETTE[rng.integers(len(_PALETTE))] * 0.35
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        tex = _stripe_texture(
            centers[mask], base, alt, spec.texture_frequency * 1.5, direction, rng.uniform(0, 2 * np.pi)
        )
        paint(mask, tex)

    if spec.ground_plane:
        z0 = spec.bbox_min[2] + 0.12 * extent[2]
        mask = np.abs(centers[:, 2] - z0) <= shell
        base = np.array([0.75, 0.72, 0.65])
        alt = np.array([0.25, 0.28, 0.32])
        paint(mask, _checker_texture(centers[mask], base, alt, spec.texture_frequency * 0.75))

    occupied = float(np.count_nonzero(density)) / len(density)
    if occupied > 0.9:
        raise ValueError("scene too dense")

    out = grid.replace(
        density=density.reshape(grid.dims).astype(np.float32),
        color=color.reshape(grid.dims + (3,)).astype(np.float32),
    )
    return out, make_camera_array(spec)


def make_camera_array(spec: SceneSpec) -> list[CameraModel]:
    """Cameras looking at the bbox center, as a ring or a spherical grid."""
    center = 0.5 * (np.asarray(spec.bbox_min, float) + np.asarray(spec.bbox_max, float))
    w, h = int(spec.image_size[0]), int(spec.image_size[1])
    f = (w / 2.0) / math.tan(math.radians(spec.fov_deg) / 2.0)
    cams = []
    if spec.camera_kind == "ring":
        angles = [(2 * math.pi * i / spec.n_cameras, spec.elevations_deg[i % len(spec.elevations_deg)])
                  for i in range(spec.n_cameras)]
    else:
        n_az = max(1, int(math.ceil(math.sqrt(spec.n_cameras))))
        n_el = max(1, int(math.ceil(spec.n_cameras / n_az)))
        lo, hi = min(spec.elevations_deg), max(spec.elevations_deg)
        angles = []
        for j in range(n_el):
            el = lo + (hi - lo) * (j + 0.5) / n_el if n_el > 1 else 0.5 * (lo + hi)
            for i in range(n_az):
                if len(angles) < spec.n_cameras:
                    angles.append((2 * math.pi * (i + 0.5 * (j % 2)) / n_az, el))
    for az, el_deg in angles:
        el = math.radians(el_deg)
        eye = center + spec.camera_radius * np.array(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
        )
        rot, t = look_at_pose(eye, center)
        cams.append(CameraModel(fx=f, fy=f, cx=w / 2.0, cy=h / 2.0, width=w, height=h, rotation=rot, translation=t))
    return cams
