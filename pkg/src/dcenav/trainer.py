"""Recurrent actor-critic trained with clipped PPO over batched environments.

Synchronous collection: every update gathers ``rollout`` steps from each of
``n_envs`` environments, computes GAE advantages and runs a few epochs of
truncated-BPTT minibatch updates over whole sequences.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import pickle
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import neural
from .dce import DceModel, load_dce
from .env import (CurriculumConfig, CurriculumState, EnvConfig, Outcome, VecNavEnv,
                  curriculum_update, episode_seed)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# -- policy ----------------------------------------------------------------------

class PolicyNet(nn.Module):
    """ELU trunk (512, 256, 64) -> GRU(64) -> tanh-Gaussian actor and value heads."""

    def __init__(self, obs_dim: int, hidden: int = 64, trunk=(512, 256, 64),
                 action_dim: int = 3, init_log_std: float = -0.5, dist_scale: float = 0.1):
        super().__init__()
        self.obs_dim = obs_dim
        self.hidden = hidden
        layers, width = [], obs_dim
        for n in trunk:
            layers.append(nn.Linear(width, n))
            width = n
        self.trunk = nn.ModuleList(layers)
        self.gru = nn.GRUCell(width, hidden)
        self.actor = nn.Linear(hidden, action_dim)
        self.critic = nn.Linear(hidden, 1)
        self.log_std = nn.Parameter(torch.full((action_dim,), float(init_log_std)))
        with torch.no_grad():
            self.actor.weight.mul_(0.01)
            self.actor.bias.zero_()
        scale = torch.ones(obs_dim)
        scale[3] = dist_scale
        self.register_buffer("obs_scale", scale)

    def features(self, obs):
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        x = obs * self.obs_scale
        for layer in self.trunk:
            x = neural.elu(layer(x))
        return x

    def step(self, obs, h):
        """One recurrent step: returns (mean, value, new hidden)."""
        h = self.gru(self.features(obs), h)
        return self.actor(h), self.critic(h)[..., 0], h

    def forward(self, obs_seq, h0, starts=None):
        """Sequence pass over (T, B, D); hidden is zeroed where ``starts`` is set."""
        T, B = obs_seq.shape[:2]
        x = self.features(obs_seq.reshape(T * B, -1)).reshape(T, B, -1)
        h = h0
        outs = []
        for t in range(T):
            if starts is not None:
                h = h * (1.0 - starts[t].to(h.dtype))[:, None]
            h = self.gru(x[t], h)
            outs.append(h)
        feats = torch.stack(outs)
        return self.actor(feats), self.critic(feats)[..., 0], h

    def initial_hidden(self, n: int):
        return torch.zeros(n, self.hidden)


def gaussian_logp(u, mean, log_std):
    var = torch.exp(2.0 * log_std)
    return (-0.5 * (u - mean) ** 2 / var - log_std - 0.5 * math.log(2.0 * math.pi)).sum(-1)


def gaussian_entropy(log_std):
    return (log_std + 0.5 * math.log(2.0 * math.pi * math.e)).sum()


def squash(u):
    return torch.tanh(u)


# -- returns ----------------------------------------------------------------------

def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float):
    """GAE advantages and returns for (T, B) arrays; ``dones[t]`` ends the episode after step t."""
    T = rewards.shape[0]
    adv = np.zeros_like(rewards, dtype=np.float64)
    last = np.zeros(rewards.shape[1:], dtype=np.float64)
    next_value = np.asarray(last_value, dtype=np.float64)
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


class RunningMeanStd:
    def __init__(self):
        self.mean = 0.0
        self.var = 1.0
        self.count = 1e-4

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).ravel()
        b_mean, b_var, n = x.mean(), x.var(), x.size
        delta = b_mean - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.var = (self.var * self.count + b_var * n + delta ** 2 * self.count * n / tot) / tot
        self.count = tot

    @property
    def std(self) -> float:
        return math.sqrt(self.var + 1e-8)


# -- config -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    n_envs: int = 64
    rollout: int = 32
    total_steps: int = 2_000_000
    gamma: float = 0.98
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    lr: float = 1e-4
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    kl_target: float = 0.01
    epochs: int = 4
    minibatches: int = 2
    max_grad_norm: float = 1.0
    init_log_std: float = -0.5
    checkpoint_every: int = 50
    dce_checkpoint: str = ""
    env: EnvConfig = field(default_factory=EnvConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.n_envs < 1:
            raise ValueError("n_envs must be >= 1")


@dataclass
class RolloutBuffer:
    obs: np.ndarray       # (T, E, D)
    raw_actions: np.ndarray  # pre-squash Gaussian samples (T, E, 3)
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    starts: np.ndarray    # episode begins at this step (hidden zeroed before it)
    h0: np.ndarray        # hidden state entering the rollout (E, H)
    last_value: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


# -- trainer ------------------------------------------------------------------------

METRIC_FIELDS = ["update", "env_steps", "level", "episodes", "success_rate", "crash_rate",
                 "timeout_rate", "mean_return", "policy_loss", "value_loss", "entropy", "kl", "lr"]


class Trainer:
    def __init__(self, config: TrainConfig, dce: DceModel | None = None):
        self.config = config
        if dce is None:
            if not config.dce_checkpoint or not Path(config.dce_checkpoint).exists():
                raise TrainingError(f"DCE checkpoint not found: {config.dce_checkpoint!r}")
            dce = load_dce(config.dce_checkpoint)
        self.dce = dce
        for p in dce.parameters():
            p.requires_grad_(False)
        torch.manual_seed(config.seed)
        self.torch_gen = torch.Generator().manual_seed(config.seed)
        self.curriculum = CurriculumState(level=config.curriculum.start_level)
        self.episode_counter = np.zeros(config.n_envs, dtype=np.int64)
        self.env = VecNavEnv(config.env, dce, config.n_envs, reset_source=self._next_episode)
        self.policy = PolicyNet(self.env.obs_dim, init_log_std=config.init_log_std)
        self.optimizer = torch.optim.Adam(self.policy.parameters(), lr=config.lr)
        self.lr = config.lr
        self.ret_rms = RunningMeanStd()
        self.update_idx = 0
        self.env_steps = 0
        self.ep_returns = np.zeros(config.n_envs)
        self.recent = []  # (outcome, return) of episodes finished since the last metric row
        seeds = [self._seed_for(e) for e in range(config.n_envs)]
        self.obs = self.env.reset([self.curriculum.level] * config.n_envs, seeds)
        self.hidden = self.policy.initial_hidden(config.n_envs)
        self.starts = np.ones(config.n_envs, dtype=bool)

    def _seed_for(self, e: int) -> int:
        s = episode_seed(self.config.seed, e, int(self.episode_counter[e]))
        self.episode_counter[e] += 1
        return s

    def _next_episode(self, e: int):
        return self.curriculum.level, self._seed_for(e)

    # -- collection -----------------------------------------------------------------

    @torch.no_grad()
    def collect_rollouts(self) -> RolloutBuffer:
        cfg = self.config
        T, E = cfg.rollout, cfg.n_envs
        D = self.env.obs_dim
        buf = RolloutBuffer(np.zeros((T, E, D), np.float32), np.zeros((T, E, 3), np.float32),
                            np.zeros((T, E)), np.zeros((T, E)), np.zeros((T, E)),
                            np.zeros((T, E), bool), np.zeros((T, E), bool),
                            self.hidden.numpy().copy(), np.zeros(E))
        h = self.hidden
        std = torch.exp(self.policy.log_std)
        for t in range(T):
            starts = torch.from_numpy(self.starts)
            h = h * (1.0 - starts.float())[:, None]
            obs_t = torch.from_numpy(self.obs)
            mean, value, h = self.policy.step(obs_t, h)
            u = mean + std * torch.randn(mean.shape, generator=self.torch_gen)
            logp = gaussian_logp(u, mean, self.policy.log_std)
            value = value.double().numpy() * self.ret_rms.std + self.ret_rms.mean
            action = squash(u).double().numpy()
            buf.obs[t] = self.obs
            buf.raw_actions[t] = u.numpy()
            buf.logp[t] = logp.numpy()
            buf.values[t] = value
            buf.starts[t] = self.starts
            obs, reward, done, infos = self.env.step(action)
            buf.rewards[t] = reward
            buf.dones[t] = done
            self.ep_returns += reward
            for e, level, _seed, out in infos:
                self._record_episode(level, out, self.ep_returns[e])
                self.ep_returns[e] = 0.0
            self.obs = obs
            self.starts = done.copy()
        self.env_steps += T * E
        h_last = h * (1.0 - torch.from_numpy(self.starts).float())[:, None]
        _, last_value, _ = self.policy.step(torch.from_numpy(self.obs), h_last)
        buf.last_value = last_value.double().numpy() * self.ret_rms.std + self.ret_rms.mean
        self.hidden = h
        return buf

    def _record_episode(self, level: int, outcome, ret: float) -> None:
        self.recent.append((outcome.outcome, ret))
        if level == self.curriculum.level:
            cur = self.curriculum.record(outcome.outcome)
            new = curriculum_update(cur, self.config.curriculum)
            if new.level != cur.level:
                log.info("curriculum level %d -> %d (success %.2f, crash %.2f over %d)",
                         cur.level, new.level, cur.successes / cur.episodes,
                         cur.crashes / cur.episodes, cur.episodes)
            self.curriculum = new

    # -- update --------------------------------------------------------------------------

    def ppo_update(self, buf: RolloutBuffer) -> dict:
        cfg = self.config
        adv, returns = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_value,
                                   cfg.gamma, cfg.gae_lambda)
        self.ret_rms.update(returns)
        ret_n = (returns - self.ret_rms.mean) / self.ret_rms.std
        adv_n = (adv - adv.mean()) / (adv.std() + 1e-8)
        obs = torch.from_numpy(buf.obs)
        u = torch.from_numpy(buf.raw_actions)
        old_logp = torch.from_numpy(buf.logp).float()
        adv_t = torch.from_numpy(adv_n).float()
        ret_t = torch.from_numpy(ret_n).float()
        starts = torch.from_numpy(buf.starts)
        h0 = torch.from_numpy(buf.h0)
        E = buf.obs.shape[1]
        mb = max(E // cfg.minibatches, 1)
        stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "kl": 0.0}
        n = 0
        for _ in range(cfg.epochs):
            perm = torch.randperm(E, generator=self.torch_gen)
            for s in range(0, E, mb):
                idx = perm[s:s + mb]
                mean, value, _ = self.policy(obs[:, idx], h0[idx], starts[:, idx])
                logp = gaussian_logp(u[:, idx], mean, self.policy.log_std)
                ratio = torch.exp(logp - old_logp[:, idx])
                a = adv_t[:, idx]
                surrogate = torch.min(ratio * a, torch.clamp(ratio, 1 - cfg.clip, 1 + cfg.clip) * a)
                policy_loss = -surrogate.mean()
                value_loss = 0.5 * ((value - ret_t[:, idx]) ** 2).mean()
                entropy = gaussian_entropy(self.policy.log_std)
                loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at update {self.update_idx}: "
                                        f"policy={policy_loss.item()}, value={value_loss.item()}")
                self.optimizer.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(self.policy.parameters(), cfg.max_grad_norm)
                self.optimizer.step()
                with torch.no_grad():
                    log_ratio = logp - old_logp[:, idx]
                    kl = ((torch.exp(log_ratio) - 1.0) - log_ratio).mean().item()
                stats["policy_loss"] += policy_loss.item()
                stats["value_loss"] += value_loss.item()
                stats["entropy"] += entropy.item()
                stats["kl"] += kl
                n += 1
        stats = {k: v / n for k, v in stats.items()}
        if stats["kl"] > 2.0 * cfg.kl_target:
            self.lr = max(self.lr / 2.0, cfg.lr_min)
        elif stats["kl"] < 0.5 * cfg.kl_target:
            self.lr = min(self.lr * 1.5, cfg.lr_max)
        for g in self.optimizer.param_groups:
            g["lr"] = self.lr
        stats["lr"] = self.lr
        return stats

    def train_iteration(self) -> dict:
        buf = self.collect_rollouts()
        stats = self.ppo_update(buf)
        self.update_idx += 1
        outs = [o for o, _ in self.recent]
        n = len(outs)
        row = {"update": self.update_idx, "env_steps": self.env_steps,
               "level": self.curriculum.level, "episodes": n,
               "success_rate": outs.count(Outcome.SUCCESS) / n if n else float("nan"),
               "crash_rate": outs.count(Outcome.CRASH) / n if n else float("nan"),
               "timeout_rate": outs.count(Outcome.TIMEOUT) / n if n else float("nan"),
               "mean_return": float(np.mean([r for _, r in self.recent])) if n else float("nan"),
               **stats}
        self.recent = []
        return row

    # -- persistence ------------------------------------------------------------------

    def policy_meta(self) -> dict:
        return {"kind": "policy", "obs_dim": self.env.obs_dim,
                "latent_dim": self.dce.config.latent_dim, "hidden": self.policy.hidden,
                "ret_mean": self.ret_rms.mean, "ret_var": self.ret_rms.var,
                "ret_count": self.ret_rms.count, "update": self.update_idx,
                "env_steps": self.env_steps}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = self.policy_meta()
        if self.config.dce_checkpoint:
            dce_path = Path(self.config.dce_checkpoint).resolve()
            meta["dce_checkpoint"] = os.path.relpath(dce_path, d.resolve())
            meta["dce_sha256"] = neural.file_sha256(dce_path)
        neural.save_checkpoint(d / "policy.ckpt", self.policy.state_dict(), meta)
        env = self.env
        env_state = {k: copy.deepcopy(getattr(env, k)) for k in
                     ("worlds", "padded", "state", "goal", "tau", "mount_pos", "mount_rot",
                      "prev_action", "prev_dist", "t", "level", "reward_params", "crashed", "done",
                      "steps_to_goal", "seeds", "rngs", "physics_steps")}
        state = {"optimizer": self.optimizer.state_dict(), "lr": self.lr,
                 "torch_gen": self.torch_gen.get_state(), "curriculum": self.curriculum,
                 "episode_counter": self.episode_counter.copy(), "ret_rms": vars(self.ret_rms),
                 "update_idx": self.update_idx, "env_steps": self.env_steps,
                 "ep_returns": self.ep_returns.copy(), "recent": list(self.recent),
                 "obs": self.obs.copy(), "hidden": self.hidden.clone(), "starts": self.starts.copy(),
                 "env": env_state}
        with open(d / "resume.pkl", "wb") as f:
            pickle.dump(state, f)

    @classmethod
    def resume(cls, config: TrainConfig, directory, dce: DceModel | None = None) -> "Trainer":
        d = Path(directory)
        tr = cls(config, dce)
        tensors, meta = neural.load_checkpoint(d / "policy.ckpt")
        tr.policy.load_state_dict(tensors)
        with open(d / "resume.pkl", "rb") as f:
            state = pickle.load(f)
        tr.optimizer.load_state_dict(state["optimizer"])
        tr.lr = state["lr"]
        tr.torch_gen.set_state(state["torch_gen"])
        tr.curriculum = state["curriculum"]
        tr.episode_counter = state["episode_counter"]
        vars(tr.ret_rms).update(state["ret_rms"])
        tr.update_idx = state["update_idx"]
        tr.env_steps = state["env_steps"]
        tr.ep_returns = state["ep_returns"]
        tr.recent = state["recent"]
        tr.obs = state["obs"]
        tr.hidden = state["hidden"]
        tr.starts = state["starts"]
        for k, v in state["env"].items():
            setattr(tr.env, k, v)
        return tr


def load_policy(path) -> tuple[PolicyNet, dict]:
    tensors, meta = neural.load_checkpoint(path)
    if meta.get("kind") != "policy":
        raise TrainingError(f"{path} is not a policy checkpoint")
    policy = PolicyNet(meta["obs_dim"], hidden=meta["hidden"])
    policy.load_state_dict(tensors)
    policy.eval()
    return policy, meta


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _truncate_log(path: Path, last_update: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames
        rows = [r for r in reader if int(r["update"]) <= last_update]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return rows


def train(config: TrainConfig, out_dir, dce: DceModel | None = None, resume_from=None,
          max_updates: int | None = None) -> Trainer:
    """Run PPO until ``total_steps``; metrics go to ``metrics.csv`` under ``out_dir``.

    Checkpoints (``policy.ckpt`` + ``resume.pkl``) are written every
    ``checkpoint_every`` updates into ``out_dir/checkpoints/update_XXXXX`` and
    to ``out_dir/final``. Wall-clock timing goes to a separate ``timing.csv``
    so the metric log stays reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer.resume(config, resume_from, dce) if resume_from else Trainer(config, dce)
    metrics_path = out / "metrics.csv"
    timing_path = out / "timing.csv"
    new_file = not metrics_path.exists() or resume_from is None
    mode = "w" if new_file else "a"
    t0 = time.time()
    if not new_file:
        # drop rows logged after the checkpoint; keep the wall clock running
        _truncate_log(metrics_path, trainer.update_idx)
        wall = _truncate_log(timing_path, trainer.update_idx)
        if wall:
            t0 -= float(wall[-1]["wall_s"])
    # never exceed the step budget
    updates_total = max(1, config.total_steps // (config.n_envs * config.rollout))
    with open(metrics_path, mode, newline="") as mf, open(timing_path, mode, newline="") as tf:
        mw = csv.writer(mf)
        tw = csv.writer(tf)
        if new_file:
            mw.writerow(METRIC_FIELDS)
            tw.writerow(["update", "wall_s"])
        done_updates = 0
        while trainer.update_idx < updates_total:
            row = trainer.train_iteration()
            mw.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
            tw.writerow([row["update"], f"{time.time() - t0:.2f}"])
            mf.flush()
            tf.flush()
            log.info("update %d steps %d level %d success %.2f crash %.2f return %.2f kl %.4f lr %.2e",
                     row["update"], row["env_steps"], row["level"], row["success_rate"],
                     row["crash_rate"], row["mean_return"], row["kl"], row["lr"])
            if config.checkpoint_every and trainer.update_idx % config.checkpoint_every == 0:
                trainer.save(out / "checkpoints" / f"update_{trainer.update_idx:05d}")
            done_updates += 1
            if max_updates is not None and done_updates >= max_updates:
                break
    trainer.save(out / "final")
    return trainer
