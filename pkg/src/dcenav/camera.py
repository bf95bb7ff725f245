"""Pinhole depth camera: ray-cast rendering, sensor noise and raster files.

The camera looks along the body x axis (y left, z up). Depth is z-depth,
the distance along the optical axis, and ``0.0`` marks an invalid pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels
from .world import WorldSpec

INVALID = 0.0
RASTER_MAGIC = b"DCNVDPT1"


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 160
    height: int = 120
    horizontal_fov: float = 87.0
    vertical_fov: float | None = 58.0
    min_range: float = 0.2
    max_range: float = 10.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not 0.0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")

    @property
    def fx(self) -> float:
        return self.width / (2.0 * np.tan(np.radians(self.horizontal_fov) / 2.0))

    @property
    def fy(self) -> float:
        if self.vertical_fov is None:
            return self.fx
        return self.height / (2.0 * np.tan(np.radians(self.vertical_fov) / 2.0))

    def ray_directions(self) -> np.ndarray:
        """Body-frame rays (H*W, 3), row-major, with unit forward component."""
        u = np.arange(self.width) + 0.5 - 0.5 * self.width
        v = np.arange(self.height) + 0.5 - 0.5 * self.height
        uu, vv = np.meshgrid(u, v)
        dirs = np.stack([np.ones_like(uu), -uu / self.fx, -vv / self.fy], axis=-1)
        return dirs.reshape(-1, 3)


@dataclass(frozen=True)
class SensorNoiseParams:
    sigma0: float = 0.01
    sigma_slope: float = 0.004
    p_invalid: float = 0.02

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma_slope < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0.0 <= self.p_invalid <= 1.0:
            raise ValueError("p_invalid must be a probability")


@dataclass(frozen=True)
class MountPerturbation:
    max_offset: float = 0.05
    max_angle_deg: float = 3.0


@dataclass
class PaddedWorlds:
    """Obstacle arrays for a batch of worlds, padded to a common count."""

    centers: np.ndarray
    rots: np.ndarray
    halves: np.ndarray
    counts: np.ndarray
    room_half: np.ndarray
    walls: np.ndarray

    @classmethod
    def from_worlds(cls, worlds, walls: bool = True) -> "PaddedWorlds":
        n = max([len(w.obstacles) for w in worlds] + [1])
        E = len(worlds)
        out = cls(np.zeros((E, n, 3)), np.tile(np.eye(3), (E, n, 1, 1)), np.ones((E, n, 3)),
                  np.zeros(E, dtype=np.int64), np.zeros((E, 3)), np.full(E, walls))
        for e, w in enumerate(worlds):
            out.set(e, w)
        return out

    def set(self, e: int, world: WorldSpec) -> None:
        c, r, h = world.obstacle_arrays()
        n = len(c)
        if n > self.centers.shape[1]:
            self._grow(n)
        self.centers[e, :n] = c
        self.rots[e, :n] = r
        self.halves[e, :n] = h
        self.counts[e] = n
        self.room_half[e] = world.room_half

    def _grow(self, n: int) -> None:
        E, old = self.counts.shape[0], self.centers.shape[1]
        pad = n - old
        self.centers = np.concatenate([self.centers, np.zeros((E, pad, 3))], axis=1)
        self.rots = np.concatenate([self.rots, np.tile(np.eye(3), (E, pad, 1, 1))], axis=1)
        self.halves = np.concatenate([self.halves, np.ones((E, pad, 3))], axis=1)


def render_batch(padded: PaddedWorlds, positions: np.ndarray, rotations: np.ndarray,
                 intr: CameraIntrinsics, rays: np.ndarray | None = None) -> np.ndarray:
    """Render one depth image per environment; returns float32 (E, H, W)."""
    rays = intr.ray_directions() if rays is None else rays
    E = positions.shape[0]
    out = np.empty((E, intr.width * intr.height))
    _kernels.render_batch(np.ascontiguousarray(positions, dtype=np.float64),
                          np.ascontiguousarray(rotations, dtype=np.float64), rays,
                          padded.centers, padded.rots, padded.halves, padded.counts,
                          padded.room_half, padded.walls, intr.min_range, intr.max_range, out)
    return out.reshape(E, intr.height, intr.width).astype(np.float32)


def render_depth(world: WorldSpec, position, quat, intr: CameraIntrinsics | None = None,
                 walls: bool = True) -> np.ndarray:
    """Depth image of ``world`` seen from a camera at ``position`` with attitude ``quat``.

    ``walls=False`` drops the room boundary, leaving an unbounded scene.
    """
    intr = intr or CameraIntrinsics()
    padded = PaddedWorlds.from_worlds([world], walls=walls)
    rot = Rotation.from_quat(quat).as_matrix()[None]
    return render_batch(padded, np.asarray(position, dtype=np.float64)[None], rot, intr)[0]


def apply_sensor_noise(img: np.ndarray, params: SensorNoiseParams, seed=None,
                       intr: CameraIntrinsics | None = None) -> np.ndarray:
    """Depth-proportional Gaussian noise plus Bernoulli pixel dropout.

    Works on a single image or a stack. ``seed`` may be an int or a
    :class:`numpy.random.Generator`.
    """
    intr = intr or CameraIntrinsics()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    img = np.asarray(img, dtype=np.float32)
    valid = img != INVALID
    out = img.copy()
    if params.sigma0 > 0 or params.sigma_slope > 0:
        std = params.sigma0 + params.sigma_slope * img.astype(np.float64)
        noisy = img + rng.standard_normal(img.shape) * std
        noisy = np.clip(noisy, intr.min_range, intr.max_range)
        out = np.where(valid, noisy, INVALID).astype(np.float32)
    if params.p_invalid > 0:
        drop = rng.random(img.shape) < params.p_invalid
        out[drop] = INVALID
    return out


def perturb_camera_mount(base_position, base_quat, seed=None,
                         config: MountPerturbation | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Offset a body-frame camera mount by a small random translation and rotation."""
    config = config or MountPerturbation()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    offset = rng.uniform(-config.max_offset, config.max_offset, size=3)
    angles = rng.uniform(-config.max_angle_deg, config.max_angle_deg, size=3)
    pos = np.asarray(base_position, dtype=np.float64) + offset
    rot = Rotation.from_quat(base_quat) * Rotation.from_euler("xyz", angles, degrees=True)
    return pos, rot.as_quat()


# -- raster files ------------------------------------------------------------------

def write_raster(path, img: np.ndarray) -> None:
    """Little-endian float32 raster behind a 16-byte header (magic, width, height)."""
    img = np.asarray(img, dtype="<f4")
    if img.ndim != 2:
        raise ValueError("raster must be 2-D")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(RASTER_MAGIC + struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def read_raster(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RASTER_MAGIC:
        raise ValueError(f"{path}: not a depth raster")
    w, h = struct.unpack("<II", data[8:16])
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {body.size}")
    return body.reshape(h, w).astype(np.float32)


def read_depth_png(path, intr: CameraIntrinsics | None = None) -> np.ndarray:
    """16-bit millimetre depth PNG to metres; 0 stays invalid, far values saturate."""
    from PIL import Image

    intr = intr or CameraIntrinsics()
    raw = np.asarray(Image.open(path)).astype(np.float64)
    depth = raw / 1000.0
    valid = raw > 0
    depth = np.where(depth > intr.max_range, intr.max_range, depth)
    depth[valid & (depth < intr.min_range)] = INVALID
    depth[~valid] = INVALID
    return depth.astype(np.float32)


def write_depth_png(path, depth_m: np.ndarray) -> None:
    from PIL import Image

    mm = np.clip(np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def resize_depth(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resample; keeps invalid pixels invalid without blending."""
    h, w = img.shape
    rows = (np.arange(height) + 0.5) * h / height
    cols = (np.arange(width) + 0.5) * w / width
    return img[rows.astype(int)[:, None], cols.astype(int)[None, :]]
