"""Procedural room worlds with box obstacles, and robot collision queries.

Coordinates are room-centred: the interior spans ``[-L/2, L/2] x [-W/2, W/2]
x [-H/2, H/2]`` and the walls are implicit, not obstacle records. Quaternions
are scalar-last ``(x, y, z, w)`` as in :mod:`scipy.spatial.transform`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels

_IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)


class WorldTooClutteredError(RuntimeError):
    """No collision-free start/goal pair could be placed."""


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    orientation: tuple[float, float, float, float] = _IDENTITY_QUAT

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError(f"half extents must be positive, got {self.half_extents}")
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-6:
            raise ValueError("obstacle orientation must be a unit quaternion")

    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.orientation).as_matrix()


@dataclass(frozen=True)
class RobotBox:
    """Robot collision box: depth along body x, width along y, height along z."""

    depth: float = 0.43
    width: float = 0.43
    height: float = 0.25

    def __post_init__(self):
        if min(self.depth, self.width, self.height) <= 0:
            raise ValueError("robot box dimensions must be positive")

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * np.array([self.depth, self.width, self.height])


@dataclass(frozen=True)
class WorldGenConfig:
    room_min: tuple[float, float, float] = (8.0, 5.0, 4.0)
    room_max: tuple[float, float, float] = (12.0, 8.0, 6.0)
    panel_levels: int = 5
    panel_thickness: float = 0.1
    panel_span: tuple[float, float] = (0.6, 0.8)
    panel_spacing: float = 1.0
    panel_end_margin: float = 1.0
    box_half_extent: tuple[float, float] = (0.15, 0.6)
    robot: RobotBox = field(default_factory=RobotBox)

    @property
    def min_gap(self) -> float:
        return 2.0 * max(self.robot.width, self.robot.height)


@dataclass(frozen=True)
class WorldSpec:
    room_dims: tuple[float, float, float]
    obstacles: tuple[Obstacle, ...]
    level: int
    seed: int

    @property
    def room_half(self) -> np.ndarray:
        return 0.5 * np.asarray(self.room_dims, dtype=np.float64)

    def obstacle_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Centers (N, 3), rotation matrices (N, 3, 3) and half extents (N, 3)."""
        n = len(self.obstacles)
        centers = np.zeros((n, 3))
        rots = np.zeros((n, 3, 3))
        halves = np.zeros((n, 3))
        for i, ob in enumerate(self.obstacles):
            centers[i] = ob.center
            rots[i] = ob.rotation_matrix()
            halves[i] = ob.half_extents
        return centers, rots, halves

    def to_text(self) -> str:
        return world_to_text(self)


def _seed_rng(seed: int, *salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *salt]))


def _sample_panel(rng, room, cfg: WorldGenConfig, x: float) -> Obstacle:
    L, W, H = room
    t = cfg.panel_thickness
    # gap along one side: 0 = -y, 1 = +y, 2 = -z, 3 = +z
    side = int(rng.integers(4))
    span_dim = W if side < 2 else H
    max_span = min(cfg.panel_span[1], 1.0 - cfg.min_gap / span_dim)
    frac = rng.uniform(cfg.panel_span[0], max(cfg.panel_span[0], max_span))
    covered = frac * span_dim
    offset = 0.5 * span_dim - 0.5 * covered  # distance of panel centre from room axis
    if side < 2:
        sign = 1.0 if side == 0 else -1.0  # gap at -y -> panel sits at +y
        center = (x, sign * offset, 0.0)
        half = (0.5 * t, 0.5 * covered, 0.5 * H)
    else:
        sign = 1.0 if side == 2 else -1.0
        center = (x, 0.0, sign * offset)
        half = (0.5 * t, 0.5 * W, 0.5 * covered)
    return Obstacle(center=tuple(map(float, center)), half_extents=tuple(map(float, half)))


def _panel_positions(rng, n: int, length: float, cfg: WorldGenConfig) -> np.ndarray:
    lo = -0.5 * length + cfg.panel_end_margin
    hi = 0.5 * length - cfg.panel_end_margin
    slack = (hi - lo) - (n - 1) * cfg.panel_spacing
    if n == 0:
        return np.zeros(0)
    if slack < 0:
        return np.linspace(lo, hi, n)
    # spacing-constrained uniform draw: sorted uniforms over the slack plus fixed gaps
    u = np.sort(rng.uniform(0.0, slack, size=n))
    return lo + u + cfg.panel_spacing * np.arange(n)


def _sample_box(rng, room, cfg: WorldGenConfig) -> Obstacle:
    half_room = 0.5 * np.asarray(room)
    center = rng.uniform(-half_room, half_room)
    half = rng.uniform(cfg.box_half_extent[0], cfg.box_half_extent[1], size=3)
    euler = rng.uniform(-np.pi, np.pi, size=3)
    quat = Rotation.from_euler("xyz", euler).as_quat()
    quat = quat / np.linalg.norm(quat)
    return Obstacle(center=tuple(map(float, center)), half_extents=tuple(map(float, half)),
                    orientation=tuple(map(float, quat)))


def generate_world(level: int, config: WorldGenConfig | None = None, seed: int = 0) -> WorldSpec:
    """Room of random size holding ``level`` obstacles.

    The first ``config.panel_levels`` obstacles are thin wall-like panels
    across the long axis, each leaving a gap along one side; further
    obstacles are small, randomly rotated boxes.
    """
    if level < 0:
        raise ValueError("curriculum level must be non-negative")
    cfg = config or WorldGenConfig()
    rng = _seed_rng(seed, level)
    room = tuple(float(v) for v in rng.uniform(cfg.room_min, cfg.room_max))
    n_panels = min(level, cfg.panel_levels)
    xs = _panel_positions(rng, n_panels, room[0], cfg)
    order = rng.permutation(n_panels)
    obstacles = [_sample_panel(rng, room, cfg, float(xs[i])) for i in order]
    obstacles += [_sample_box(rng, room, cfg) for _ in range(level - n_panels)]
    return WorldSpec(room_dims=room, obstacles=tuple(obstacles), level=int(level), seed=int(seed))


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_yaw(quat) -> float:
    """Heading of a scalar-last quaternion (rotation of body x about room z)."""
    x, y, z, w = quat
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def check_collision(world: WorldSpec, position, quat, box: RobotBox | None = None,
                    walls: bool = True) -> bool:
    """True if the robot box overlaps an obstacle or leaves the room interior.

    Only the yaw of ``quat`` is used: the robot box stays level.
    """
    box = box or RobotBox()
    centers, rots, halves = world.obstacle_arrays()
    return bool(_kernels.box_collides(
        np.asarray(position, dtype=np.float64), yaw_matrix(quat_yaw(quat)), box.half_extents,
        centers, rots, halves, len(world.obstacles), world.room_half, walls))


def sample_start_goal(world: WorldSpec, seed: int, box: RobotBox | None = None,
                      wall_margin: float = 0.5, clearance: float = 0.2,
                      max_tries: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Collision-free start in the first third of the long axis, goal in the last.

    Placement is checked with a yaw-independent inflated box (square
    footprint of the robot's diagonal plus ``clearance``) so the robot can
    start at any heading. Pairs closer than half the room length are
    rejected.
    """
    box = box or RobotBox()
    L, W, H = world.room_dims
    diag = float(np.hypot(box.depth, box.width))
    probe = RobotBox(diag + 2 * clearance, diag + 2 * clearance, box.height + 2 * clearance)
    rng = _seed_rng(seed, 0x5747)
    third = L / 3.0
    y_lim = max(0.5 * W - wall_margin, 0.0)
    z_lim = max(0.5 * H - wall_margin, 0.0)
    ident = _IDENTITY_QUAT
    ends = [(-0.5 * L, -0.5 * L + third), (0.5 * L - third, 0.5 * L)]
    points = []
    for lo, hi in ends:
        x_lo = max(lo, -0.5 * L + wall_margin)
        x_hi = min(hi, 0.5 * L - wall_margin)
        for _ in range(max_tries):
            p = np.array([rng.uniform(x_lo, x_hi), rng.uniform(-y_lim, y_lim),
                          rng.uniform(-z_lim, z_lim)])
            if not check_collision(world, p, ident, probe):
                break
        else:
            raise WorldTooClutteredError(
                f"no free placement in x range [{x_lo:.2f}, {x_hi:.2f}] after {max_tries} tries "
                f"(level {world.level}, seed {world.seed})")
        points.append(p)
    start, goal = points
    tries = 0
    while np.linalg.norm(goal - start) < 0.5 * L:
        # only possible for very short rooms; redraw the goal
        tries += 1
        if tries > max_tries:
            raise WorldTooClutteredError("start/goal separation below half the room length")
        g = np.array([rng.uniform(0.5 * L - third, 0.5 * L - wall_margin),
                      rng.uniform(-y_lim, y_lim), rng.uniform(-z_lim, z_lim)])
        if not check_collision(world, g, ident, probe):
            goal = g
    return start, goal


# -- text format -----------------------------------------------------------------

_HEADER = "# dcenav world v1"


def world_to_text(world: WorldSpec) -> str:
    """Key-value text, one obstacle per line; floats use ``repr`` and round-trip exactly."""
    lines = [_HEADER, f"level {world.level}", f"seed {world.seed}",
             "room " + " ".join(repr(float(v)) for v in world.room_dims)]
    for ob in world.obstacles:
        lines.append(
            "obstacle center " + " ".join(repr(v) for v in ob.center)
            + " half " + " ".join(repr(v) for v in ob.half_extents)
            + " quat " + " ".join(repr(v) for v in ob.orientation))
    return "\n".join(lines) + "\n"


def world_from_text(text: str) -> WorldSpec:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _HEADER:
        raise ValueError("not a dcenav world file")
    level = seed = None
    room = None
    obstacles = []
    for ln in lines[1:]:
        key, *rest = ln.split()
        if key == "level":
            level = int(rest[0])
        elif key == "seed":
            seed = int(rest[0])
        elif key == "room":
            room = tuple(float(v) for v in rest)
        elif key == "obstacle":
            fields = {}
            i = 0
            while i < len(rest):
                name = rest[i]
                n = 4 if name == "quat" else 3
                fields[name] = tuple(float(v) for v in rest[i + 1:i + 1 + n])
                i += 1 + n
            obstacles.append(Obstacle(fields["center"], fields["half"], fields["quat"]))
        else:
            raise ValueError(f"unknown world record {key!r}")
    if level is None or seed is None or room is None:
        raise ValueError("world file missing level, seed or room")
    return WorldSpec(room_dims=room, obstacles=tuple(obstacles), level=level, seed=seed)
