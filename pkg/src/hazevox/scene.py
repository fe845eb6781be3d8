"""Core scene types: voxel grids, cameras, rays, images, multi-view datasets.

All types are immutable value objects; their numpy payloads are marked
read-only so grids and datasets can be shared freely across workers.
Mutation happens by constructing a new object (see ``VoxelGrid.replace``).

Conventions, used everywhere in the package:
  * world frame is right-handed, z up;
  * cameras look down their own -z axis, +x right, +y up;
  * grids store raw density sigma (1/world-length) and view-independent
    RGB color per voxel, laid out x-fastest when linearized;
  * samples outside the grid bounding box are vacuum: (0, black).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CorruptGridError

# Default global ray clipping range; ray/bbox intersection is clamped to it.
DEFAULT_NEAR = 1e-3
DEFAULT_FAR = 1e3

_ROT_TOL = 1e-6
_DIR_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class VoxelGrid:
    """Dense voxel field of (density, color) over an axis-aligned box.

    Attributes:
        dims: (nx, ny, nz), each >= 2.
        bbox_min / bbox_max: world-space corners, min < max per axis.
        density: (nx, ny, nz) float32, sigma >= 0, finite.
        color: (nx, ny, nz, 3) float32, channels in [0, 1].
    """

    dims: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density: np.ndarray
    color: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"grid dims must be >= 2 per axis, got {dims}")
        bmin = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        bmax = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(bmin)) and np.all(np.isfinite(bmax))):
            raise ValueError("bbox must be finite")
        if not np.all(bmax > bmin):
            raise ValueError("bbox extents must be strictly positive")
        density = np.asarray(self.density, dtype=np.float32).reshape(dims)
        color = np.asarray(self.color, dtype=np.float32).reshape(dims + (3,))
        if not np.all(np.isfinite(density)) or np.any(density < 0):
            raise ValueError("density must be finite and >= 0")
        if not np.all(np.isfinite(color)) or color.min() < 0 or color.max() > 1:
            raise ValueError("color channels must be finite and in [0, 1]")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "bbox_min", _readonly(bmin))
        object.__setattr__(self, "bbox_max", _readonly(bmax))
        object.__setattr__(self, "density", _readonly(density))
        object.__setattr__(self, "color", _readonly(color))

    @property
    def voxel_size(self) -> np.ndarray:
        """Edge lengths of one voxel, per axis."""
        return (self.bbox_max - self.bbox_min) / np.asarray(self.dims)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def voxel_centers(self) -> np.ndarray:
        """(nx, ny, nz, 3) world positions of every voxel center."""
        axes = [
            self.bbox_min[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size[a]
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def replace(self, *, density=None, color=None) -> "VoxelGrid":
        """New grid sharing bbox/dims with substituted payload arrays."""
        return VoxelGrid(
            dims=self.dims,
            bbox_min=self.bbox_min,
            bbox_max=self.bbox_max,
            density=self.density if density is None else density,
            color=self.color if color is None else color,
        )

    def allclose(self, other: "VoxelGrid", tol: float = 0.0) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.bbox_min, other.bbox_min, atol=tol)
            and np.allclose(self.bbox_max, other.bbox_max, atol=tol)
            and np.allclose(self.density, other.density, atol=tol)
            and np.allclose(self.color, other.color, atol=tol)
        )

    @staticmethod
    def empty(dims, bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        """All-vacuum grid (sigma = 0, black)."""
        dims = tuple(int(d) for d in dims)
        return VoxelGrid(
            dims=dims,
            bbox_min=np.asarray(bbox_min, dtype=np.float64),
            bbox_max=np.asarray(bbox_max, dtype=np.float64),
            density=np.zeros(dims, dtype=np.float32),
            color=np.zeros(dims + (3,), dtype=np.float32),
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics in pixels plus a camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world frame

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("fx and fy must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose must be finite")
        if np.max(np.abs(r @ r.T - np.eye(3))) > _ROT_TOL:
            raise ValueError("rotation must be orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ROT_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", _readonly(r))
        object.__setattr__(self, "translation", _readonly(t))

    @property
    def cam_to_world(self) -> np.ndarray:
        """4x4 row-major camera-to-world transform."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_cam_to_world(fx, fy, cx, cy, width, height, matrix) -> "CameraModel":
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        return CameraModel(fx, fy, cx, cy, int(width), int(height), m[:3, :3], m[:3, 3])


@dataclass(frozen=True)
class Ray:
    """World-space ray r(t) = origin + t * direction with clip range."""

    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise ValueError("ray origin/direction must be finite")
        if abs(np.linalg.norm(d) - 1.0) > _DIR_TOL:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.t_near <= self.t_far):
            raise ValueError("require 0 <= t_near <= t_far")
        object.__setattr__(self, "origin", _readonly(o))
        object.__setattr__(self, "direction", _readonly(d))
        object.__setattr__(self, "t_near", float(self.t_near))
        object.__setattr__(self, "t_far", float(self.t_far))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class ImageBuffer:
    """H x W x 3 linear-radiance raster; channels clamped to [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must have shape (height, width, 3)")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        object.__setattr__(self, "pixels", _readonly(np.clip(px, 0.0, 1.0)))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @staticmethod
    def constant(width: int, height: int, rgb) -> "ImageBuffer":
        px = np.broadcast_to(np.asarray(rgb, dtype=np.float32), (height, width, 3))
        return ImageBuffer(px.copy())


@dataclass(frozen=True)
class MultiViewDataset:
    """Posed views plus optional ground-truth grid and free-form metadata.

    metadata keys used by the pipeline: scene_id, haze (kind), seed,
    bbox_min/bbox_max (fitting domain), delta_ref.
    """

    views: tuple
    gt_grid: Optional[VoxelGrid] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise ValueError("dataset needs at least one view")
        w, h = views[0][1].width, views[0][1].height
        for cam, img in views:
            if not isinstance(cam, CameraModel) or not isinstance(img, ImageBuffer):
                raise TypeError("views must be (CameraModel, ImageBuffer) pairs")
            if img.width != w or img.height != h:
                raise ValueError("all views must share image dimensions")
        object.__setattr__(self, "views", views)

    def __len__(self) -> int:
        return len(self.views)

    def cameras(self) -> list[CameraModel]:
        return [cam for cam, _ in self.views]

    def images(self) -> list[ImageBuffer]:
        return [img for _, img in self.views]

    def subset(self, indices: Iterable[int]) -> "MultiViewDataset":
        views = tuple(self.views[i] for i in indices)
        return MultiViewDataset(views=views, gt_grid=self.gt_grid, metadata=dict(self.metadata))


# ---------------------------------------------------------------------------
# Trilinear grid sampling
# ---------------------------------------------------------------------------

_CORNER_OFFSETS = [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)]


def interp_corners(dims, bbox_min, bbox_max, points):
    """Trilinear interpolation support for a batch of world points.

    Grid nodes sit at voxel centers; coordinates are clamped to the node
    lattice, so the half-voxel margin inside the bbox extends the boundary
    voxel values (constant extrapolation). Points outside the closed bbox
    are flagged and must be zeroed by the caller.

    Args:
        dims: grid dims (nx, ny, nz).
        bbox_min / bbox_max: (3,) world corners.
        points: (S, 3) world positions.

    Returns:
        inside: (S,) bool mask.
        i0: (S, 3) int32 lower-corner voxel indices.
        frac: (S, 3) fractional offsets in [0, 1], dtype follows points.
    """
    dims = np.asarray(dims, dtype=np.int64)
    pts = np.asarray(points)
    dtype = pts.dtype if pts.dtype in (np.float32, np.float64) else np.float64
    pts = pts.astype(dtype, copy=False)
    bmin = np.asarray(bbox_min, dtype=dtype)
    bmax = np.asarray(bbox_max, dtype=dtype)
    if not np.all(np.isfinite(pts)):
        raise ValueError("invalid sample point")
    cell = (bmax - bmin) / dims.astype(dtype)
    g = (pts - bmin) / cell - 0.5
    inside = np.all((pts >= bmin) & (pts <= bmax), axis=-1)
    g = np.clip(g, 0.0, (dims - 1).astype(dtype))
    i0 = np.minimum(g.astype(np.int32), (dims - 2).astype(np.int32))
    frac = g - i0
    return inside, i0, frac


def corner_flat_index_and_weight(corner: int, i0, frac, dims):
    """Flat C-order index and trilinear weight for one of the 8 corners."""
    dx, dy, dz = _CORNER_OFFSETS[corner]
    nx, ny, nz = dims
    ix = i0[:, 0] + dx
    iy = i0[:, 1] + dy
    iz = i0[:, 2] + dz
    wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
    wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
    wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
    return (ix * ny + iy) * nz + iz, wx * wy * wz


def sample_grid_points(grid: VoxelGrid, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized trilinear sample of (sigma, rgb) at world points.

    Points outside the bbox return vacuum (0, black). Raises on non-finite
    query points or grid payloads.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    inside, i0, frac = interp_corners(grid.dims, grid.bbox_min, grid.bbox_max, pts)
    dens = grid.density.reshape(-1)
    cols = grid.color.reshape(-1, 3)
    sigma = np.zeros(len(pts), dtype=np.float64)
    rgb = np.zeros((len(pts), 3), dtype=np.float64)
    for c in range(8):
        idx, w = corner_flat_index_and_weight(c, i0, frac, grid.dims)
        sigma += w * dens[idx]
        rgb += w[:, None] * cols[idx]
    if not np.all(np.isfinite(sigma)):
        raise CorruptGridError("corrupt grid")
    sigma[~inside] = 0.0
    rgb[~inside] = 0.0
    return sigma, rgb


def grid_sample(grid: VoxelGrid, point) -> tuple[float, np.ndarray]:
    """Sample the continuous field at one world point.

    Returns (sigma, rgb); exact at voxel centers, vacuum outside the bbox.
    """
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError("invalid sample point")
    sigma, rgb = sample_grid_points(grid, p[None, :])
    return float(sigma[0]), rgb[0]


def trilinear_resample(values: np.ndarray, old_dims, new_dims) -> np.ndarray:
    """Resample a per-voxel array onto a new resolution of the same bbox.

    Sampling happens at the new voxel centers using the same node-clamped
    trilinear convention as ``grid_sample``; works for (nx,ny,nz) and
    (nx,ny,nz,C) arrays.
    """
    old_dims = tuple(int(d) for d in old_dims)
    new_dims = tuple(int(d) for d in new_dims)
    scalar = values.ndim == 3
    vals = values.reshape(old_dims + (-1,))
    nchan = vals.shape[3]
    # Unit-cube bbox: resampling is bbox-independent.
    axes = [(np.arange(new_dims[a], dtype=np.float64) + 0.5) / new_dims[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    _, i0, frac = interp_corners(old_dims, np.zeros(3), np.ones(3), pts)
    flat = vals.reshape(-1, nchan)
    out = np.zeros((len(pts), nchan), dtype=np.float64)
    for c in range(8):
        idx, w = corner_flat_index_and_weight(c, i0, frac, old_dims)
        out += w[:, None] * flat[idx]
    out = out.reshape(new_dims + (nchan,)).astype(values.dtype)
    return out[..., 0] if scalar else out


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------

def ray_bbox_span(origins, directions, bbox_min, bbox_max, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """Clip rays against an axis-aligned box (slab test).

    Returns (t0, t1) arrays; rays that miss get t0 == t1 == 0 and render
    as pure background.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    bmin = np.asarray(bbox_min, dtype=np.float64)
    bmax = np.asarray(bbox_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (bmin - o) * inv
        tb = (bmax - o) * inv
    # Axis-parallel rays: slab test degenerates; +/-inf from the division
    # sorts correctly unless the origin sits exactly on a slab plane (0/0).
    ta = np.nan_to_num(ta, nan=-np.inf)
    tb = np.nan_to_num(tb, nan=np.inf)
    # 0/0 produced matching -inf/inf pairs only for on-plane origins; for a
    # zero direction component outside the slab both go the same sign.
    par = d == 0.0
    out = par & ((o < bmin) | (o > bmax))
    tmin = np.where(par, -np.inf, np.minimum(ta, tb)).max(axis=1)
    tmax = np.where(par, np.inf, np.maximum(ta, tb)).min(axis=1)
    tmax = np.where(out.any(axis=1), -np.inf, tmax)
    t0 = np.maximum(tmin, near)
    t1 = np.minimum(tmax, far)
    miss = ~(t1 > t0)
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def camera_ray_directions(camera: CameraModel, u, v) -> np.ndarray:
    """World-frame unit directions through continuous pixel coords (u, v).

    The ray passes through (u + 0.5, v + 0.5) on the sensor, so integer
    coordinates address pixel centers.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - camera.cx) / camera.fx
    y = -(v + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def make_camera_ray(
    camera: CameraModel,
    pixel,
    bbox_min,
    bbox_max,
    near: float = DEFAULT_NEAR,
    far: float = DEFAULT_FAR,
) -> Ray:
    """Build the world ray through a pixel, clipped to a grid bbox.

    Raises ValueError for pixels outside [0, width) x [0, height).
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) out of bounds for {camera.width}x{camera.height}")
    d = camera_ray_directions(camera, u, v).reshape(3)
    t0, t1 = ray_bbox_span(camera.translation[None, :], d[None, :], bbox_min, bbox_max, near, far)
    return Ray(origin=camera.translation, direction=d, t_near=float(t0[0]), t_far=float(t1[0]))


def camera_ray_grid(camera: CameraModel, bbox_min, bbox_max, near=DEFAULT_NEAR, far=DEFAULT_FAR):
    """All pixel-center rays of a camera as flat arrays (row-major pixels).

    Returns (origins (N,3), directions (N,3), t0 (N,), t1 (N,)) with
    N = width * height.
    """
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    dirs = camera_ray_directions(camera, uu.reshape(-1), vv.reshape(-1))
    origins = np.broadcast_to(camera.translation, dirs.shape)
    t0, t1 = ray_bbox_span(origins, dirs, bbox_min, bbox_max, near, far)
    return np.ascontiguousarray(origins), dirs, t0, t1


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world (rotation, translation) looking from eye to target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        raise ValueError("view direction parallel to up vector")
    right /= rn
    true_up = np.cross(right, fwd)
    rot = np.stack([right, true_up, -fwd], axis=1)  # columns: +x, +y, +z(cam)
    return rot, eye
