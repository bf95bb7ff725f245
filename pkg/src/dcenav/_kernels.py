"""Numba kernels for ray casting and oriented-box overlap.

Rotation matrices map box-local coordinates to room coordinates
(columns are the box axes). Obstacle arrays are padded per environment;
``counts[e]`` gives the number of live obstacles in environment ``e``.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

_EPS = 1e-9


@njit(cache=True, fastmath=False)
def _ray_obb(ox, oy, oz, dx, dy, dz, c, R, h):
    # move ray into the box frame: local = R^T (p - c)
    px = ox - c[0]
    py = oy - c[1]
    pz = oz - c[2]
    t_near = -np.inf
    t_far = np.inf
    for a in range(3):
        lo = R[0, a] * px + R[1, a] * py + R[2, a] * pz
        ld = R[0, a] * dx + R[1, a] * dy + R[2, a] * dz
        if abs(ld) < 1e-12:
            if lo < -h[a] or lo > h[a]:
                return np.inf
        else:
            t1 = (-h[a] - lo) / ld
            t2 = (h[a] - lo) / ld
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > t_near:
                t_near = t1
            if t2 < t_far:
                t_far = t2
            if t_near > t_far:
                return np.inf
    if t_far < 0.0:
        return np.inf
    if t_near < 0.0:
        return 0.0
    return t_near


@njit(cache=True)
def _ray_room_exit(ox, oy, oz, dx, dy, dz, room_half):
    t = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] > 1e-12:
            ta = (room_half[a] - o[a]) / d[a]
        elif d[a] < -1e-12:
            ta = (-room_half[a] - o[a]) / d[a]
        else:
            continue
        if ta < t:
            t = ta
    if t < 0.0:
        t = 0.0
    return t


@njit(parallel=True, cache=True)
def render_batch(origins, rots, dirs, centers, obs_rots, halves, counts,
                 room_half, walls, min_range, max_range, out):
    """Z-depth for every (environment, pixel).

    ``dirs`` are camera-frame rays with unit forward (x) component, so the
    ray parameter at the hit equals the depth along the optical axis.
    """
    n_env = out.shape[0]
    n_pix = out.shape[1]
    for idx in prange(n_env * n_pix):
        e = idx // n_pix
        p = idx - e * n_pix
        R = rots[e]
        cx = dirs[p, 0]
        cy = dirs[p, 1]
        cz = dirs[p, 2]
        dx = R[0, 0] * cx + R[0, 1] * cy + R[0, 2] * cz
        dy = R[1, 0] * cx + R[1, 1] * cy + R[1, 2] * cz
        dz = R[2, 0] * cx + R[2, 1] * cy + R[2, 2] * cz
        ox = origins[e, 0]
        oy = origins[e, 1]
        oz = origins[e, 2]
        if walls[e]:
            t = _ray_room_exit(ox, oy, oz, dx, dy, dz, room_half[e])
        else:
            t = np.inf
        for k in range(counts[e]):
            tk = _ray_obb(ox, oy, oz, dx, dy, dz, centers[e, k], obs_rots[e, k], halves[e, k])
            if tk < t:
                t = tk
        if t > max_range:
            t = max_range
        elif t < min_range:
            t = 0.0
        out[e, p] = t


@njit(cache=True)
def obb_overlap(c1, R1, h1, c2, R2, h2):
    """Separating-axis test for two oriented boxes (touching counts as overlap)."""
    # rotation of box 2 expressed in box 1 frame
    Rm = np.empty((3, 3))
    AbsR = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            s = 0.0
            for k in range(3):
                s += R1[k, i] * R2[k, j]
            Rm[i, j] = s
            AbsR[i, j] = abs(s) + _EPS
    d0 = c2[0] - c1[0]
    d1 = c2[1] - c1[1]
    d2 = c2[2] - c1[2]
    t = np.empty(3)
    for i in range(3):
        t[i] = R1[0, i] * d0 + R1[1, i] * d1 + R1[2, i] * d2
    for i in range(3):
        ra = h1[i]
        rb = h2[0] * AbsR[i, 0] + h2[1] * AbsR[i, 1] + h2[2] * AbsR[i, 2]
        if abs(t[i]) > ra + rb:
            return False
    for j in range(3):
        ra = h1[0] * AbsR[0, j] + h1[1] * AbsR[1, j] + h1[2] * AbsR[2, j]
        rb = h2[j]
        if abs(t[0] * Rm[0, j] + t[1] * Rm[1, j] + t[2] * Rm[2, j]) > ra + rb:
            return False
    for i in range(3):
        i1 = (i + 1) % 3
        i2 = (i + 2) % 3
        for j in range(3):
            j1 = (j + 1) % 3
            j2 = (j + 2) % 3
            ra = h1[i1] * AbsR[i2, j] + h1[i2] * AbsR[i1, j]
            rb = h2[j1] * AbsR[i, j2] + h2[j2] * AbsR[i, j1]
            if abs(t[i2] * Rm[i1, j] - t[i1] * Rm[i2, j]) > ra + rb:
                return False
    return True


@njit(cache=True)
def _box_outside_room(c, R, h, room_half):
    for a in range(3):
        ext = abs(R[a, 0]) * h[0] + abs(R[a, 1]) * h[1] + abs(R[a, 2]) * h[2]
        if c[a] + ext >= room_half[a] or c[a] - ext <= -room_half[a]:
            return True
    return False


@njit(cache=True)
def box_collides(c, R, h, centers, obs_rots, halves, count, room_half, walls):
    if walls and _box_outside_room(c, R, h, room_half):
        return True
    for k in range(count):
        if obb_overlap(c, R, h, centers[k], obs_rots[k], halves[k]):
            return True
    return False


@njit(parallel=True, cache=True)
def collide_batch(positions, rots, half, centers, obs_rots, halves, counts, room_half, walls, out):
    for e in prange(positions.shape[0]):
        out[e] = box_collides(positions[e], rots[e], half, centers[e], obs_rots[e],
                              halves[e], counts[e], room_half[e], walls[e])
