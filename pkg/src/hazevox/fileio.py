"""On-disk formats: VXGRID01 grids, PFM/PNG images, dataset directories.

Grid file layout (little-endian throughout):
  magic "VXGRID01" | u32 nx ny nz | f32 bbox min xyz, max xyz |
  nx*ny*nz records of f32 (sigma, r, g, b), x varying fastest.

Datasets are a directory with a ``dataset.json`` manifest, metric-exact
PFM images plus 8-bit sRGB PNG previews, and optional grid payloads.
PFM round-trips are bit-exact; PNG is preview-only.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BadMagicError,
    DataError,
    DimsMismatchError,
    MissingViewFileError,
    TruncatedGridError,
)
from .scene import CameraModel, ImageBuffer, MultiViewDataset, VoxelGrid

GRID_MAGIC = b"VXGRID01"


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------

def write_grid(grid: VoxelGrid, path) -> None:
    path = Path(path)
    nx, ny, nz = grid.dims
    header = GRID_MAGIC + struct.pack("<3I", nx, ny, nz)
    header += struct.pack("<6f", *grid.bbox_min.astype(np.float32), *grid.bbox_max.astype(np.float32))
    records = np.empty((grid.n_voxels, 4), dtype="<f4")
    # transpose to (nz, ny, nx) so the C-order ravel runs x fastest
    records[:, 0] = grid.density.transpose(2, 1, 0).reshape(-1)
    records[:, 1:] = grid.color.transpose(2, 1, 0, 3).reshape(-1, 3)
    path.write_bytes(header + records.tobytes())


def read_grid(path) -> VoxelGrid:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(GRID_MAGIC) or blob[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not a VXGRID01 file")
    off = len(GRID_MAGIC)
    if len(blob) < off + 12 + 24:
        raise TruncatedGridError(f"{path}: truncated header")
    nx, ny, nz = struct.unpack_from("<3I", blob, off)
    off += 12
    bbox = struct.unpack_from("<6f", blob, off)
    off += 24
    if min(nx, ny, nz) < 2:
        raise DimsMismatchError(f"{path}: invalid dims {(nx, ny, nz)}")
    expected = nx * ny * nz * 16
    payload = blob[off:]
    if len(payload) < expected:
        raise TruncatedGridError(
            f"{path}: payload has {len(payload)} bytes, expected {expected}"
        )
    if len(payload) > expected:
        raise DimsMismatchError(
            f"{path}: payload has {len(payload)} bytes but dims {(nx, ny, nz)} need {expected}"
        )
    records = np.frombuffer(payload, dtype="<f4").reshape(-1, 4)
    density = records[:, 0].reshape(nz, ny, nx).transpose(2, 1, 0)
    color = records[:, 1:].reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
    return VoxelGrid(
        dims=(nx, ny, nz),
        bbox_min=np.asarray(bbox[:3], dtype=np.float64),
        bbox_max=np.asarray(bbox[3:], dtype=np.float64),
        density=density,
        color=color,
    )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def write_pfm(img: ImageBuffer, path) -> None:
    """Portable float map, color "PF", little-endian, rows bottom-up."""
    path = Path(path)
    header = f"PF\n{img.width} {img.height}\n-1.0\n".encode("ascii")
    data = np.ascontiguousarray(img.pixels[::-1], dtype="<f4")
    path.write_bytes(header + data.tobytes())


def read_pfm(path) -> ImageBuffer:
    path = Path(path)
    blob = path.read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"PF":
        raise DataError(f"{path}: not a color PFM file")
    try:
        width, height = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise DataError(f"{path}: malformed PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * 3 * 4
    payload = parts[3]
    if len(payload) != expected:
        raise DataError(f"{path}: PFM payload size {len(payload)} != {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)
    return ImageBuffer(data[::-1].astype(np.float32))


def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> sRGB-encoded [0,1]."""
    linear = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(linear, 1.0 / 2.4) - 0.055,
    )


def write_png(img: ImageBuffer, path) -> None:
    """8-bit sRGB preview of a linear-radiance image."""
    encoded = np.round(srgb_encode(img.pixels) * 255.0).astype(np.uint8)
    Image.fromarray(encoded, mode="RGB").save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def write_dataset(dataset: MultiViewDataset, out_dir) -> Path:
    """Write a dataset directory; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img) in enumerate(dataset.views):
        pfm_rel = f"images/view_{i:03d}.pfm"
        png_rel = f"images/view_{i:03d}.png"
        write_pfm(img, out / pfm_rel)
        write_png(img, out / png_rel)
        views.append(
            {
                "image_pfm": pfm_rel,
                "image_png": png_rel,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "width": cam.width,
                "height": cam.height,
                "cam_to_world": [float(v) for v in cam.cam_to_world.reshape(-1)],
            }
        )
    meta = dict(dataset.metadata)
    manifest = {
        "scene_id": meta.pop("scene_id", "scene"),
        "seed": int(meta.pop("seed", 0)),
        "views": views,
    }
    if dataset.gt_grid is not None:
        write_grid(dataset.gt_grid, out / "grid_gt.vx")
        manifest["gt_grid"] = "grid_gt.vx"
    if meta:
        manifest["metadata"] = meta
    manifest_path = out / "dataset.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def read_dataset(path) -> MultiViewDataset:
    """Load a dataset directory (or its dataset.json path)."""
    path = Path(path)
    manifest_path = path if path.name.endswith(".json") else path / "dataset.json"
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON") from exc
    views = []
    for i, v in enumerate(manifest.get("views", [])):
        img_path = root / v["image_pfm"]
        if not img_path.exists():
            raise MissingViewFileError(i, str(img_path))
        cam = CameraModel.from_cam_to_world(
            v["fx"], v["fy"], v["cx"], v["cy"], v["width"], v["height"], np.asarray(v["cam_to_world"])
        )
        views.append((cam, read_pfm(img_path)))
    gt = None
    if "gt_grid" in manifest:
        gt = read_grid(root / manifest["gt_grid"])
    metadata = dict(manifest.get("metadata", {}))
    metadata["scene_id"] = manifest.get("scene_id", "scene")
    metadata["seed"] = manifest.get("seed", 0)
    return MultiViewDataset(views=tuple(views), gt_grid=gt, metadata=metadata)
