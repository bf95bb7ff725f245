"""Robot-size-aware "collision image" remapping of depth images.

Each pixel becomes the smallest valid depth inside the image-space footprint
of the robot's cross-section placed at that pixel's depth, minus half the
robot depth. The footprint half-size in pixels is ``floor(f * half_size /
d)``; an invalid centre pixel uses ``max_range`` for ``d``. Invalid pixels
never contribute to the minimum, and a pixel stays invalid only if its whole
footprint is invalid.

Two implementations are provided: :func:`collision_image_naive`, a per-pixel
loop used as the reference, and the default vectorised version built on a
2-D sparse table for range-minimum queries. Both produce bit-identical output.
"""

from __future__ import annotations

import math

import numpy as np

from .camera import INVALID, CameraIntrinsics
from .world import RobotBox


def valid_mask(img: np.ndarray) -> np.ndarray:
    return np.asarray(img) != INVALID


def _finish(minimum: np.ndarray, robot: RobotBox, intr: CameraIntrinsics,
            depth_offset: float | None) -> np.ndarray:
    off = np.float32(0.5 * robot.depth if depth_offset is None else depth_offset)
    found = np.isfinite(minimum)
    vals = np.where(found, minimum, np.float32(0.0)).astype(np.float32) - off
    vals = np.maximum(vals, np.float32(intr.min_range))
    return np.where(found, vals, np.float32(INVALID)).astype(np.float32)


def window_radii(img: np.ndarray, intr: CameraIntrinsics, robot: RobotBox):
    """Integer footprint half-width and half-height (pixels) for every pixel."""
    d = np.where(img == INVALID, intr.max_range, img.astype(np.float64))
    h, w = img.shape[-2:]
    rx = np.floor(intr.fx * (0.5 * robot.width) / d)
    ry = np.floor(intr.fy * (0.5 * robot.height) / d)
    return np.minimum(ry, h).astype(np.int64), np.minimum(rx, w).astype(np.int64)


def collision_image_naive(img: np.ndarray, intr: CameraIntrinsics, robot: RobotBox,
                          depth_offset: float | None = None) -> np.ndarray:
    """Reference per-pixel min filter (slow)."""
    img = np.asarray(img, dtype=np.float32)
    h, w = img.shape
    field = np.where(img == INVALID, np.float32(np.inf), img)
    minimum = np.empty_like(field)
    half_w = 0.5 * robot.width
    half_h = 0.5 * robot.height
    for r in range(h):
        for c in range(w):
            d = float(img[r, c])
            if d == INVALID:
                d = intr.max_range
            rx = min(math.floor(intr.fx * half_w / d), w)
            ry = min(math.floor(intr.fy * half_h / d), h)
            win = field[max(r - ry, 0):r + ry + 1, max(c - rx, 0):c + rx + 1]
            minimum[r, c] = win.min()
    return _finish(minimum, robot, intr, depth_offset)


def _sparse_table(field: np.ndarray):
    """table[ky][kx][..., r, c] = min over rows r..r+2**ky-1, cols c..c+2**kx-1."""
    h, w = field.shape[-2:]
    table = []
    row_level = field
    ky = 0
    while True:
        levels = [row_level]
        kx = 0
        cur = row_level
        while (2 << kx) <= w:
            step = 1 << kx
            nxt = np.full_like(cur, np.inf)
            nxt[..., :, : w - step] = np.minimum(cur[..., :, : w - step], cur[..., :, step:])
            cur = nxt
            levels.append(cur)
            kx += 1
        table.append(levels)
        if (2 << ky) > h:
            break
        step = 1 << ky
        nxt = np.full_like(row_level, np.inf)
        nxt[..., : h - step, :] = np.minimum(row_level[..., : h - step, :], row_level[..., step:, :])
        row_level = nxt
        ky += 1
    return table


def _floor_log2(n: np.ndarray) -> np.ndarray:
    # n >= 1; exact for the small sizes used here
    return (np.frexp(n.astype(np.float64))[1] - 1).astype(np.int64)


def collision_image(img: np.ndarray, intr: CameraIntrinsics, robot: RobotBox,
                    depth_offset: float | None = None, naive: bool = False) -> np.ndarray:
    """Collision image for one depth image (H, W) or a stack (B, H, W).

    ``depth_offset`` overrides the amount subtracted from the minimum
    (default: half the robot depth). ``naive=True`` routes to the reference
    loop.
    """
    img = np.asarray(img, dtype=np.float32)
    if naive:
        if img.ndim == 2:
            return collision_image_naive(img, intr, robot, depth_offset)
        return np.stack([collision_image_naive(x, intr, robot, depth_offset) for x in img])
    squeeze = img.ndim == 2
    batch = img[None] if squeeze else img
    B, h, w = batch.shape
    field = np.where(batch == INVALID, np.float32(np.inf), batch)
    table = _sparse_table(field)
    ry, rx = window_radii(batch, intr, robot)
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    r0 = np.maximum(rows - ry, 0)
    r1 = np.minimum(rows + ry, h - 1)
    c0 = np.maximum(cols - rx, 0)
    c1 = np.minimum(cols + rx, w - 1)
    ky = _floor_log2(r1 - r0 + 1)
    kx = _floor_log2(c1 - c0 + 1)
    r_hi = r1 - (1 << ky) + 1
    c_hi = c1 - (1 << kx) + 1
    stacked = np.stack([np.stack(levels) for levels in table])  # (KY, KX, B, H, W)
    bidx = np.broadcast_to(np.arange(B)[:, None, None], ky.shape)
    m = np.minimum(
        np.minimum(stacked[ky, kx, bidx, r0, c0], stacked[ky, kx, bidx, r0, c_hi]),
        np.minimum(stacked[ky, kx, bidx, r_hi, c0], stacked[ky, kx, bidx, r_hi, c_hi]))
    out = _finish(m, robot, intr, depth_offset)
    return out[0] if squeeze else out
