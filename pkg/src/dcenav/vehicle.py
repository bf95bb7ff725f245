"""Velocity-controlled multirotor model at 100 Hz and the action-to-command map.

The low-level velocity controller is abstracted as a first-order lag on the
body-frame velocity and yaw rate. Roll and pitch follow the commanded
acceleration through a small-angle tilt model. All functions work on batches
of robots (leading axis = environment).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

GRAVITY = 9.81


@dataclass(frozen=True)
class ActionLimits:
    s_max: float = 1.5
    i_max_deg: float = 30.0
    omega_max_deg: float = 60.0

    def __post_init__(self):
        if min(self.s_max, self.i_max_deg, self.omega_max_deg) <= 0:
            raise ValueError("action limits must be positive")


def action_to_command(a, limits: ActionLimits) -> np.ndarray:
    """Map policy actions in [-1, 1]^3 to ``[v_x, v_y, v_z, yaw_rate]`` (body frame).

    Out-of-range actions are clipped to [-1, 1].
    """
    a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
    speed = limits.s_max * (a[..., 0] + 1.0) / 2.0
    incl = np.radians(limits.i_max_deg) * a[..., 1]
    u = np.empty(a.shape[:-1] + (4,))
    u[..., 0] = speed * np.cos(incl)
    u[..., 1] = 0.0
    u[..., 2] = speed * np.sin(incl)
    u[..., 3] = np.radians(limits.omega_max_deg) * a[..., 2]
    return u


@dataclass(frozen=True)
class KickConfig:
    p_kick: float = 0.01
    max_dv: float = 0.2
    max_dyaw_rate_deg: float = 10.0


@dataclass(frozen=True)
class VehicleParams:
    tau: float = 0.3
    tau_jitter: float = 0.1
    dt: float = 0.01
    kick: KickConfig = field(default_factory=KickConfig)


@dataclass
class RobotState:
    """Batched state: position (inertial), body velocity, Euler attitude, body rates."""

    p: np.ndarray
    v: np.ndarray
    yaw: np.ndarray
    roll: np.ndarray
    pitch: np.ndarray
    omega: np.ndarray

    @classmethod
    def at_rest(cls, p, yaw) -> "RobotState":
        p = np.atleast_2d(np.asarray(p, dtype=np.float64)).copy()
        n = p.shape[0]
        return cls(p, np.zeros((n, 3)), np.broadcast_to(np.asarray(yaw, dtype=np.float64), (n,)).copy(),
                   np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def copy(self) -> "RobotState":
        return RobotState(*(np.array(x, copy=True) for x in
                            (self.p, self.v, self.yaw, self.roll, self.pitch, self.omega)))

    def rotation(self) -> Rotation:
        return Rotation.from_euler("ZYX", np.stack([self.yaw, self.pitch, self.roll], axis=-1))

    @property
    def q(self) -> np.ndarray:
        """Attitude quaternions, scalar-last (E, 4)."""
        return self.rotation().as_quat()

    def subset(self, idx) -> "RobotState":
        return RobotState(self.p[idx], self.v[idx], self.yaw[idx], self.roll[idx],
                          self.pitch[idx], self.omega[idx])

    def assign(self, idx, other: "RobotState") -> None:
        for name in ("p", "v", "yaw", "roll", "pitch", "omega"):
            dst = getattr(self, name)
            dst[idx] = np.reshape(getattr(other, name), dst[idx].shape)


def sample_time_constants(rng: np.random.Generator, n: int, params: VehicleParams) -> np.ndarray:
    """Per-episode controller time constants within +-jitter of nominal."""
    return params.tau * rng.uniform(1.0 - params.tau_jitter, 1.0 + params.tau_jitter, size=n)


def _wrap(angle):
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def step_physics(state: RobotState, cmd: np.ndarray, tau, dt: float = 0.01) -> RobotState:
    """Advance by ``dt``; the lag is discretised exactly (``1 - exp(-dt/tau)``)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cmd = np.atleast_2d(cmd)
    alpha = (1.0 - np.exp(-dt / np.asarray(tau, dtype=np.float64)))[..., None]
    v_new = state.v + alpha * (cmd[:, :3] - state.v)
    wz = state.omega[:, 2] + alpha[:, 0] * (cmd[:, 3] - state.omega[:, 2])
    acc = (v_new - state.v) / dt
    pitch = np.arctan(acc[:, 0] / GRAVITY)
    roll = -np.arctan(acc[:, 1] / GRAVITY)
    omega = np.stack([(roll - state.roll) / dt, (pitch - state.pitch) / dt, wz], axis=-1)
    yaw = _wrap(state.yaw + wz * dt)
    new = RobotState(state.p, v_new, yaw, roll, pitch, omega)
    new.p = state.p + new.rotation().apply(v_new) * dt
    return new


def kick_impulses(u, unit, config: KickConfig):
    """Impulses from pre-drawn uniforms: ``u`` in [0, 1) (E,), ``unit`` in [-1, 1] (E, 4).

    Returns ``(kicked, dv (E, 3), dyaw_rate (E,))``.
    """
    kicked = np.asarray(u) < config.p_kick
    scale = np.array([config.max_dv] * 3 + [np.radians(config.max_dyaw_rate_deg)])
    imp = np.where(kicked[:, None], np.asarray(unit) * scale, 0.0)
    return kicked, imp[:, :3], imp[:, 3]


def apply_random_wrench(state: RobotState, config: KickConfig, rng: np.random.Generator):
    """Bernoulli-timed velocity and yaw-rate impulses; returns ``(state, kicked_mask)``."""
    n = state.p.shape[0]
    kicked, dv, dw = kick_impulses(rng.random(n), rng.uniform(-1.0, 1.0, size=(n, 4)), config)
    if not kicked.any():
        return state, kicked
    out = state.copy()
    out.v += dv
    out.omega[:, 2] += dw
    return out, kicked


def with_params(params: VehicleParams, **kw) -> VehicleParams:
    return replace(params, **kw)
