"""Navigation POMDP: observations, reward, episode lifecycle and curriculum.

One agent step = one depth capture. Between captures the physics runs a
number of 100 Hz sub-steps (10 nominally, jittered to mimic sensor
latency). Observations are

    [goal direction (3, vehicle frame), goal distance, body velocity (3),
     roll, pitch, body rates (3), previous action (3), latent (J)]

for 15 + J values in total.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from . import camera as cam
from .dce import DceModel, preprocess
from .vehicle import (ActionLimits, RobotState, VehicleParams, action_to_command,
                      kick_impulses, sample_time_constants, step_physics)
from .world import (RobotBox, WorldGenConfig, WorldSpec, WorldTooClutteredError,
                    generate_world, sample_start_goal, yaw_matrix)
from . import _kernels

log = logging.getLogger(__name__)

GOAL_DIR_AT_GOAL = np.array([1.0, 0.0, 0.0])
N_STATE_OBS = 15


class Outcome(enum.IntEnum):
    SUCCESS = 0
    CRASH = 1
    TIMEOUT = 2


@dataclass(frozen=True)
class EpisodeOutcome:
    outcome: Outcome
    steps: int
    final_distance: float
    steps_to_goal: int | None = None


def classify_outcome(crashed: bool, final_distance: float, steps: int,
                     success_radius: float = 1.0, steps_to_goal: int | None = None) -> EpisodeOutcome:
    if crashed:
        kind = Outcome.CRASH
    elif final_distance <= success_radius:
        kind = Outcome.SUCCESS
    else:
        kind = Outcome.TIMEOUT
    return EpisodeOutcome(kind, int(steps), float(final_distance), steps_to_goal)


# -- observations ------------------------------------------------------------------

@dataclass
class Observation:
    goal_dir: np.ndarray
    goal_dist: float
    v: np.ndarray
    roll: float
    pitch: float
    omega: np.ndarray
    prev_action: np.ndarray
    z: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.goal_dir, [self.goal_dist], self.v, [self.roll, self.pitch],
                               self.omega, self.prev_action, self.z]).astype(np.float32)

    @classmethod
    def from_vector(cls, x) -> "Observation":
        x = np.asarray(x)
        return cls(x[0:3], float(x[3]), x[4:7], float(x[7]), float(x[8]), x[9:12], x[12:15], x[15:])


def goal_in_vehicle_frame(p, yaw, goal):
    """Unit direction and distance to the goal in the yaw-aligned vehicle frame."""
    rel = np.atleast_2d(goal) - np.atleast_2d(p)
    c, s = np.cos(yaw), np.sin(yaw)
    local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], -1)
    dist = np.linalg.norm(local, axis=-1)
    safe = np.where(dist > 1e-9, dist, 1.0)[:, None]
    direction = np.where(dist[:, None] > 1e-9, local / safe, GOAL_DIR_AT_GOAL)
    return direction, dist


def build_observation(state: RobotState, goal, prev_action, z) -> np.ndarray:
    """Batched observation vectors (E, 15 + J) as float32."""
    direction, dist = goal_in_vehicle_frame(state.p, state.yaw, goal)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return np.concatenate([direction, dist[:, None], state.v, state.roll[:, None],
                           state.pitch[:, None], state.omega, np.atleast_2d(prev_action), z],
                          axis=-1).astype(np.float32)


# -- reward ------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardParams:
    """Weights and shape constants of the navigation reward.

    ``lambdas``/``etas`` are the weights in force; :func:`reward_at_level`
    sets them to ``kappa * (n + level_offset)`` and ``xi * (n + level_offset)``.
    ``progress_sign`` multiplies the distance-change term.
    """

    kappa: tuple = (0.1, 0.2, 0.05, 0.1)
    xi: tuple = (0.05, 0.05)
    lambdas: tuple = (0.0, 0.0, 0.0, 0.0)
    etas: tuple = (0.0, 0.0)
    nu1: float = 5.0
    nu2: float = 0.5
    nu3: float = 20.0
    nu4: float = 10.0
    nu5: tuple = (0.1, 0.1, 0.1, 0.2)
    nu6: tuple = (4.0, 1.0, 1.0, 0.5)
    nu7: tuple = (0.2, 0.2, 0.2, 0.2)
    nu8: tuple = (0.5, 0.5, 0.5, 0.5)
    nu9: float = 20.0
    level_offset: float = 0.0
    progress_sign: float = 1.0

    def __post_init__(self):
        if min(self.kappa + self.xi + self.lambdas + self.etas) < 0:
            raise ValueError("reward weights must be non-negative")
        pos = (self.nu1, self.nu2, self.nu3, self.nu4, self.nu9) + self.nu6 + self.nu8
        if min(pos) <= 0 or min(self.nu5 + self.nu7) < 0:
            raise ValueError("reward shape constants must be positive")


def reward_at_level(params: RewardParams, level: int) -> RewardParams:
    m = level + params.level_offset
    return replace(params, lambdas=tuple(k * m for k in params.kappa),
                   etas=tuple(x * m for x in params.xi))


def kernel(x, nu):
    return np.exp(-np.square(x) / nu)


def compute_reward(prev_dist, dist, a_t, a_prev, params: RewardParams, crashed,
                   limits: ActionLimits) -> np.ndarray:
    """Per-environment reward for one transition (vectorised over the leading axis)."""
    dist = np.asarray(dist, dtype=np.float64)
    prev_dist = np.asarray(prev_dist, dtype=np.float64)
    u = action_to_command(a_t, limits)
    u_prev = action_to_command(a_prev, limits)
    nu5, nu6, nu7, nu8 = (np.asarray(v) for v in (params.nu5, params.nu6, params.nu7, params.nu8))
    r1 = kernel(dist, params.nu1)
    r2 = kernel(dist, params.nu2)
    r3 = np.abs(params.nu3 - dist) / params.nu3
    r4 = params.progress_sign * params.nu4 * (dist - prev_dist)
    p1 = np.sum(nu5 * (kernel(u, nu6) - 1.0), axis=-1)
    p2 = np.sum(nu7 * (kernel(u - u_prev, nu8) - 1.0), axis=-1)
    lam, eta = params.lambdas, params.etas
    reward = lam[0] * r1 + lam[1] * r2 + lam[2] * r3 + lam[3] * r4 + eta[0] * p1 + eta[1] * p2
    return reward - params.nu9 * np.asarray(crashed, dtype=np.float64)


# -- curriculum ------------------------------------------------------------------------

@dataclass(frozen=True)
class CurriculumConfig:
    min_episodes: int = 64
    promote_success: float = 0.70
    demote_crash: float = 0.30
    max_level: int = 30
    start_level: int = 0


@dataclass(frozen=True)
class CurriculumState:
    level: int = 0
    successes: int = 0
    crashes: int = 0
    timeouts: int = 0

    @property
    def episodes(self) -> int:
        return self.successes + self.crashes + self.timeouts

    def record(self, outcome: Outcome) -> "CurriculumState":
        return replace(self, successes=self.successes + (outcome == Outcome.SUCCESS),
                       crashes=self.crashes + (outcome == Outcome.CRASH),
                       timeouts=self.timeouts + (outcome == Outcome.TIMEOUT))


def curriculum_update(cur: CurriculumState, config: CurriculumConfig) -> CurriculumState:
    """Promote above the success threshold, demote above the crash threshold.

    Nothing happens until the window holds ``min_episodes``; the window is
    cleared after each decision. Demotion wins if both thresholds fire.
    """
    n = cur.episodes
    if n < config.min_episodes:
        return cur
    success = cur.successes / n
    crash = cur.crashes / n
    level = cur.level
    if crash > config.demote_crash:
        level -= 1
    elif success > config.promote_success:
        level += 1
    level = int(min(max(level, 0), config.max_level))
    return CurriculumState(level=level)


# -- environment ---------------------------------------------------------------------

@dataclass(frozen=True)
class EnvConfig:
    camera: cam.CameraIntrinsics = field(default_factory=lambda: cam.CameraIntrinsics(96, 72))
    noise: cam.SensorNoiseParams = field(default_factory=cam.SensorNoiseParams)
    mount: cam.MountPerturbation = field(default_factory=cam.MountPerturbation)
    world: WorldGenConfig = field(default_factory=WorldGenConfig)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    limits: ActionLimits = field(default_factory=ActionLimits)
    reward: RewardParams = field(default_factory=RewardParams)
    robot: RobotBox = field(default_factory=RobotBox)
    episode_steps: int = 600
    substeps: tuple = (8, 9, 10, 11, 12)
    latency_jitter: bool = True
    success_radius: float = 1.0
    obs_noise_std: float = 0.02
    start_yaw_jitter_deg: float = 45.0
    sample_latent: bool = True


class EpisodeFinishedError(RuntimeError):
    pass


def episode_seed(base_seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(base_seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class VecNavEnv:
    """A batch of independent navigation episodes sharing one frozen DCE.

    Each episode draws everything (world, start/goal, controller time
    constant, camera mount, per-step noise) from its own generator seeded by
    ``episode_seed``, so an episode's course does not depend on the other
    environments in the batch.
    """

    def __init__(self, config: EnvConfig, dce: DceModel, n_envs: int, reset_source=None):
        if dce.config.latent_dim < 1:
            raise ValueError("DCE latent must be non-empty")
        if (dce.config.height, dce.config.width) != (config.camera.height, config.camera.width):
            raise ValueError("camera resolution does not match the DCE input")
        self.config = config
        self.dce = dce
        self.n = n_envs
        self.reset_source = reset_source
        self.auto_reset = reset_source is not None
        self.obs_dim = N_STATE_OBS + dce.config.latent_dim
        self._rays = config.camera.ray_directions()
        self.worlds: list[WorldSpec | None] = [None] * n_envs
        self.padded = cam.PaddedWorlds.from_worlds([generate_world(0, config.world, 0)] * n_envs)
        self.state = RobotState.at_rest(np.zeros((n_envs, 3)), np.zeros(n_envs))
        self.goal = np.zeros((n_envs, 3))
        self.tau = np.full(n_envs, config.vehicle.tau)
        self.mount_pos = np.zeros((n_envs, 3))
        self.mount_rot = np.tile(np.eye(3), (n_envs, 1, 1))
        self.prev_action = np.zeros((n_envs, 3))
        self.prev_dist = np.zeros(n_envs)
        self.t = np.zeros(n_envs, dtype=np.int64)
        self.level = np.zeros(n_envs, dtype=np.int64)
        self.reward_params = [config.reward] * n_envs
        self.crashed = np.zeros(n_envs, dtype=bool)
        self.done = np.ones(n_envs, dtype=bool)
        self.steps_to_goal = np.full(n_envs, -1, dtype=np.int64)
        self.seeds = np.zeros(n_envs, dtype=np.uint64)
        self.rngs: list[np.random.Generator] = [np.random.default_rng(0)] * n_envs
        self.force_substeps: int | None = None
        self.physics_steps = np.zeros(n_envs, dtype=np.int64)
        self._latent_rng_dim = dce.config.latent_dim

    # -- lifecycle -----------------------------------------------------------

    def reset_env(self, e: int, level: int, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        for attempt in range(20):
            world = generate_world(level, cfg.world, int(rng.integers(2**63)))
            try:
                start, goal = sample_start_goal(world, int(rng.integers(2**63)), cfg.robot)
                break
            except WorldTooClutteredError:
                log.debug("resampling over-cluttered world (level %d, attempt %d)", level, attempt)
        else:
            raise WorldTooClutteredError(f"could not place start/goal at level {level}")
        self.worlds[e] = world
        self.padded.set(e, world)
        bearing = np.arctan2(goal[1] - start[1], goal[0] - start[0])
        jitter = np.radians(cfg.start_yaw_jitter_deg)
        yaw = bearing + rng.uniform(-jitter, jitter)
        self.state.assign(e, RobotState.at_rest(start[None], yaw))
        self.goal[e] = goal
        self.tau[e] = sample_time_constants(rng, 1, cfg.vehicle)[0]
        mpos, mquat = cam.perturb_camera_mount(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]), rng,
                                               cfg.mount)
        self.mount_pos[e] = mpos
        self.mount_rot[e] = Rotation.from_quat(mquat).as_matrix()
        self.prev_action[e] = 0.0
        self.prev_dist[e] = np.linalg.norm(goal - start)
        self.t[e] = 0
        self.level[e] = level
        self.reward_params[e] = reward_at_level(cfg.reward, level)
        self.crashed[e] = False
        self.done[e] = False
        self.steps_to_goal[e] = -1
        self.seeds[e] = np.uint64(seed)
        self.rngs[e] = rng
        self.physics_steps[e] = 0

    def reset(self, levels, seeds) -> np.ndarray:
        for e in range(self.n):
            self.reset_env(e, int(levels[e]), int(seeds[e]))
        return self.observe()

    # -- sensing ----------------------------------------------------------------

    def camera_poses(self):
        body = self.state.rotation().as_matrix()
        pos = self.state.p + np.einsum("eij,ej->ei", body, self.mount_pos)
        rot = np.einsum("eij,ejk->eik", body, self.mount_rot)
        return pos, rot

    def render(self, idx=None) -> np.ndarray:
        pos, rot = self.camera_poses()
        if idx is not None:
            sub = cam.PaddedWorlds(self.padded.centers[idx], self.padded.rots[idx],
                                   self.padded.halves[idx], self.padded.counts[idx],
                                   self.padded.room_half[idx], self.padded.walls[idx])
            return cam.render_batch(sub, pos[idx], rot[idx], self.config.camera, self._rays)
        return cam.render_batch(self.padded, pos, rot, self.config.camera, self._rays)

    def observe(self, idx=None) -> np.ndarray:
        """Render, add sensor noise, encode and assemble observations for ``idx``."""
        idx = np.arange(self.n) if idx is None else np.asarray(idx)
        cfg = self.config
        depth = self.render(idx)
        noisy = np.empty_like(depth)
        eps = np.zeros((len(idx), self._latent_rng_dim), dtype=np.float32)
        obs_noise = np.zeros((len(idx), 8))
        for j, e in enumerate(idx):
            rng = self.rngs[e]
            noisy[j] = cam.apply_sensor_noise(depth[j], cfg.noise, rng, cfg.camera)
            if cfg.sample_latent:
                eps[j] = rng.standard_normal(self._latent_rng_dim)
            if cfg.obs_noise_std > 0:
                obs_noise[j] = rng.standard_normal(8) * cfg.obs_noise_std
        with torch.no_grad():
            mu, logvar = self.dce.encode_stats(preprocess(noisy, self.dce.config))
            z = (mu + torch.exp(0.5 * logvar) * torch.from_numpy(eps)).numpy()
        st = self.state.subset(idx)
        st = RobotState(st.p, st.v + obs_noise[:, 0:3], st.yaw, st.roll + obs_noise[:, 3],
                        st.pitch + obs_noise[:, 4], st.omega + obs_noise[:, 5:8])
        return build_observation(st, self.goal[idx], self.prev_action[idx], z)

    def _check_crash(self, idx) -> np.ndarray:
        out = np.zeros(len(idx), dtype=bool)
        rots = np.stack([yaw_matrix(y) for y in self.state.yaw[idx]])
        _kernels.collide_batch(self.state.p[idx], rots, self.config.robot.half_extents,
                               self.padded.centers[idx], self.padded.rots[idx],
                               self.padded.halves[idx], self.padded.counts[idx],
                               self.padded.room_half[idx], self.padded.walls[idx], out)
        return out

    # -- stepping -----------------------------------------------------------------

    def _substep_counts(self) -> np.ndarray:
        if self.force_substeps is not None:
            return np.full(self.n, self.force_substeps)
        if not self.config.latency_jitter:
            return np.full(self.n, 10)
        choices = np.asarray(self.config.substeps)
        return np.array([choices[self.rngs[e].integers(len(choices))] for e in range(self.n)])

    def step(self, actions):
        """Advance every environment by one agent step.

        Returns ``(obs, reward, done, infos)``; ``infos`` lists an
        :class:`EpisodeOutcome` (with env index) for each finished episode.
        Finished episodes restart immediately when the environment was built
        with a ``reset_source(env_index) -> (level, seed)``; otherwise
        stepping a finished episode raises.
        """
        actions = np.clip(np.asarray(actions, dtype=np.float64).reshape(self.n, 3), -1.0, 1.0)
        if self.done.any() and not self.auto_reset:
            raise EpisodeFinishedError("step called on a finished episode; reset it first")
        cfg = self.config
        cmd = action_to_command(actions, cfg.limits)
        counts = self._substep_counts()
        kmax = int(counts.max())
        # every env consumes the same number of draws, whatever the batch holds
        kdraw = max(max(cfg.substeps), 10, kmax)
        kick_u = np.empty((kdraw, self.n))
        kick_unit = np.empty((kdraw, self.n, 4))
        for e in range(self.n):
            kick_u[:, e] = self.rngs[e].random(kdraw)
            kick_unit[:, e] = self.rngs[e].uniform(-1.0, 1.0, size=(kdraw, 4))
        active = np.ones(self.n, dtype=bool)
        for k in range(kmax):
            live = np.flatnonzero(active & (counts > k))
            if live.size == 0:
                break
            sub = self.state.subset(live)
            kicked, dv, dw = kick_impulses(kick_u[k, live], kick_unit[k, live], cfg.vehicle.kick)
            if kicked.any():
                sub.v = sub.v + dv
                sub.omega = sub.omega.copy()
                sub.omega[:, 2] += dw
            new = step_physics(sub, cmd[live], self.tau[live], cfg.vehicle.dt)
            self.state.assign(live, new)
            self.physics_steps[live] += 1
            hit = self._check_crash(live)
            if hit.any():
                self.crashed[live[hit]] = True
                active[live[hit]] = False
        self.t += 1
        _, dist = goal_in_vehicle_frame(self.state.p, self.state.yaw, self.goal)
        reward = np.empty(self.n)
        for level in np.unique(self.level):
            g = np.flatnonzero(self.level == level)
            reward[g] = compute_reward(self.prev_dist[g], dist[g], actions[g], self.prev_action[g],
                                       self.reward_params[g[0]], self.crashed[g], cfg.limits)
        reached = (dist <= cfg.success_radius) & (self.steps_to_goal < 0)
        self.steps_to_goal[reached] = self.t[reached]
        self.prev_dist = dist
        self.prev_action = actions
        done = self.crashed | (self.t >= cfg.episode_steps)
        infos = []
        for e in np.flatnonzero(done):
            stg = int(self.steps_to_goal[e]) if self.steps_to_goal[e] >= 0 else None
            infos.append((int(e), int(self.level[e]), int(self.seeds[e]),
                          classify_outcome(bool(self.crashed[e]), float(dist[e]), int(self.t[e]),
                                           cfg.success_radius, stg)))
        self.done = done.copy()
        if self.auto_reset and done.any():
            for e in np.flatnonzero(done):
                level, seed = self.reset_source(int(e))
                self.reset_env(int(e), level, seed)
        obs = self.observe()
        return obs, reward, done, infos
