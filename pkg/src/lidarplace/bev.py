"""Bird's-eye-view rasterization and rotation augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfig
from .ingest import PointCloud


@dataclass(frozen=True)
class BevConfig:
    """Raster geometry.

    The 80 m extent and [-3, 3] m height crop are defaults chosen for
    automotive-scale scans (0.3125 m/pixel at 256 px); adjust for other sensors.
    """

    width: int = 256
    height: int = 256
    extent: float = 80.0
    z_min: float = -3.0
    z_max: float = 3.0
    accumulation: str = "max"

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidConfig("raster size must be positive")
        if not self.extent > 0:
            raise InvalidConfig("extent must be positive")
        if not self.z_min < self.z_max:
            raise InvalidConfig("z_min must be below z_max")
        if self.accumulation not in ("max", "mean"):
            raise InvalidConfig(f"unknown accumulation {self.accumulation!r}")
        return self


@dataclass
class BevImage:
    pixels: np.ndarray          # (H, W, 3) float32 in [0, 1]
    source_frame_id: int = -1
    dropped: int = 0            # points outside the extent / height crop


def cell_indices(points, config: BevConfig):
    """Row/col for each point plus the in-bounds mask."""
    half = config.extent / 2
    x, y, z = points[:, 0].astype(np.float64), points[:, 1].astype(np.float64), points[:, 2]
    inside = (np.abs(x) < half) & (np.abs(y) < half) & (z >= config.z_min) & (z <= config.z_max)
    rows = np.floor((half - x) / (config.extent / config.height)).astype(np.int64)
    cols = np.floor((y + half) / (config.extent / config.width)).astype(np.int64)
    inside &= (rows >= 0) & (rows < config.height) & (cols >= 0) & (cols < config.width)
    return rows, cols, inside


def rasterize(cloud: PointCloud, config: BevConfig = BevConfig(), frame_id: int = -1) -> BevImage:
    config.validate()
    pts = cloud.points
    rows, cols, inside = cell_indices(pts, config)
    flat = rows[inside] * config.width + cols[inside]
    inten = np.clip(pts[inside, 3], 0, 1).astype(np.float32)
    size = config.height * config.width
    if config.accumulation == "max":
        grid = np.zeros(size, np.float32)
        np.maximum.at(grid, flat, inten)
    else:
        sums = np.bincount(flat, weights=inten, minlength=size)
        counts = np.bincount(flat, minlength=size)
        grid = np.divide(sums, counts, out=np.zeros(size), where=counts > 0).astype(np.float32)
    grid = grid.reshape(config.height, config.width)
    pixels = np.repeat(grid[:, :, None], 3, axis=2)
    return BevImage(pixels, frame_id, int((~inside).sum()))


def rotate_cloud(cloud: PointCloud, angle: float) -> PointCloud:
    """Rotate (x, y) about the z axis; z and intensity untouched."""
    if not np.isfinite(angle):
        raise InvalidConfig("rotation angle must be finite")
    c, s = np.cos(angle), np.sin(angle)
    pts = cloud.points.astype(np.float64)
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1]
    return PointCloud(out.astype(np.float32), cloud.clamped)


def to_tensor(images) -> np.ndarray:
    """Stack BevImages into an (N, 3, H, W) float32 batch."""
    return np.ascontiguousarray(np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2),
                                dtype=np.float32)


def rasterize_frames(frames, config: BevConfig = BevConfig()) -> np.ndarray:
    return to_tensor([rasterize(f.cloud, config, f.id) for f in frames])


def write_pgm(image: BevImage, path):
    """8-bit binary PGM of channel 0, value = round(255 * pixel)."""
    g = np.rint(np.clip(image.pixels[:, :, 0], 0, 1) * 255).astype(np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + g.tobytes())
