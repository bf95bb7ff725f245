"""Policy evaluation across curriculum levels and report formatting."""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .dce import DceModel, load_dce
from .env import EnvConfig, Outcome, VecNavEnv, episode_seed
from .neural import file_sha256
from .trainer import PolicyNet, load_policy
from .vehicle import ActionLimits


class EvalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalRow:
    level: int
    runs: int
    success: float
    timeout: float
    crash: float
    mean_steps_to_goal: float


@dataclass(frozen=True)
class EpisodeRecord:
    seed: int
    level: int
    outcome: str
    steps: int
    final_distance: float
    ret: float
    steps_to_goal: int | None


@dataclass
class EvalReport:
    rows: list
    episodes: list

    def row(self, level: int) -> EvalRow:
        for r in self.rows:
            if r.level == level:
                return r
        raise KeyError(level)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "runs", "success_pct", "timeout_pct", "crash_pct", "mean_steps_to_goal"])
        for r in self.rows:
            w.writerow([r.level, r.runs, f"{r.success:.2f}", f"{r.timeout:.2f}", f"{r.crash:.2f}",
                        f"{r.mean_steps_to_goal:.2f}"])
        return buf.getvalue()

    def episodes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "level", "outcome", "steps", "final_distance", "return", "steps_to_goal"])
        for e in self.episodes:
            w.writerow([e.seed, e.level, e.outcome, e.steps, f"{e.final_distance:.4f}",
                        f"{e.ret:.4f}", "" if e.steps_to_goal is None else e.steps_to_goal])
        return buf.getvalue()

    def to_table(self) -> str:
        head = ["Level", "Runs", "Success %", "Timeout %", "Crash %", "Steps to goal"]
        body = [[str(r.level), str(r.runs), f"{r.success:.1f}", f"{r.timeout:.1f}",
                 f"{r.crash:.1f}", "-" if np.isnan(r.mean_steps_to_goal) else f"{r.mean_steps_to_goal:.1f}"]
                for r in self.rows]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in [head] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "report.csv").write_text(self.to_csv())
        (d / "report.txt").write_text(self.to_table())
        (d / "episodes.csv").write_text(self.episodes_csv())


def summarize(episodes, levels) -> list:
    rows = []
    for level in levels:
        eps = [e for e in episodes if e.level == level]
        n = len(eps)
        counts = {o.name: sum(e.outcome == o.name for e in eps) for o in Outcome}
        stg = [e.steps_to_goal for e in eps if e.outcome == Outcome.SUCCESS.name and e.steps_to_goal]
        rows.append(EvalRow(level, n, 100.0 * counts["SUCCESS"] / n, 100.0 * counts["TIMEOUT"] / n,
                            100.0 * counts["CRASH"] / n, float(np.mean(stg)) if stg else float("nan")))
    return rows


def resolve_dce(policy_path, meta: dict, dce: DceModel | None) -> DceModel:
    if dce is None:
        ref = meta.get("dce_checkpoint")
        if not ref:
            raise EvalError(f"{policy_path} does not name its DCE checkpoint; pass one explicitly")
        path = Path(ref)
        if not path.is_absolute():
            path = Path(policy_path).parent / path
        if not path.exists():
            raise EvalError(f"DCE checkpoint {path} referenced by {policy_path} is missing")
        if meta.get("dce_sha256") and file_sha256(path) != meta["dce_sha256"]:
            raise EvalError(f"DCE checkpoint {path} does not match the one the policy was trained with")
        dce = load_dce(path)
    if dce.config.latent_dim != meta["latent_dim"]:
        raise EvalError(f"policy expects a {meta['latent_dim']}-d latent but the DCE produces "
                        f"{dce.config.latent_dim}-d codes")
    return dce


def eval_policy(checkpoint, levels, runs_per_level: int, limits: ActionLimits | None = None,
                seed: int = 0, dce: DceModel | None = None, env_config: EnvConfig | None = None,
                n_envs: int = 64) -> EvalReport:
    """Run ``runs_per_level`` greedy episodes per level.

    Episode ``i`` at level ``L`` uses seed ``episode_seed(seed, L, i)``, so the
    worlds, starts and goals do not depend on ``n_envs`` or on other levels.
    """
    if runs_per_level < 1:
        raise ValueError("runs_per_level must be >= 1")
    if isinstance(checkpoint, PolicyNet):
        policy, meta = checkpoint, {"latent_dim": checkpoint.obs_dim - 15}
    else:
        if not Path(checkpoint).exists():
            raise EvalError(f"policy checkpoint {checkpoint} not found")
        policy, meta = load_policy(checkpoint)
    dce = resolve_dce(checkpoint, meta, dce)
    cfg = env_config or EnvConfig()
    if limits is not None:
        cfg = replace(cfg, limits=limits)
    levels = [int(x) for x in levels]
    pending = deque((lv, i, episode_seed(seed, lv, i)) for lv in levels for i in range(runs_per_level))
    total = len(pending)
    n = min(n_envs, total)
    tracking = [None] * n  # (level, seed) of the counted episode running in each env

    def next_run(e):
        if pending:
            lv, _i, s = pending.popleft()
            tracking[e] = (lv, s)
            return lv, s
        tracking[e] = None
        return levels[0], episode_seed(seed, 2**32, e)  # filler, not counted

    env = VecNavEnv(cfg, dce, n, reset_source=next_run)
    first = [next_run(e) for e in range(n)]
    obs = env.reset([lv for lv, _ in first], [s for _, s in first])
    h = policy.initial_hidden(n)
    starts = torch.zeros(n, dtype=torch.bool)
    returns = np.zeros(n)
    episodes = []
    with torch.no_grad():
        while len(episodes) < total:
            h = h * (1.0 - starts.float())[:, None]
            mean, _, h = policy.step(torch.from_numpy(obs), h)
            tracked_before = list(tracking)
            obs, reward, done, infos = env.step(torch.tanh(mean).double().numpy())
            returns += reward
            for e, level, s, out in infos:
                if tracked_before[e] is not None:
                    episodes.append(EpisodeRecord(s, level, out.outcome.name, out.steps,
                                                  out.final_distance, float(returns[e]),
                                                  out.steps_to_goal))
                returns[e] = 0.0
            starts = torch.from_numpy(done.copy())
    order = {(lv, episode_seed(seed, lv, i)): (lv, i) for lv in levels for i in range(runs_per_level)}
    episodes.sort(key=lambda ep: order[(ep.level, ep.seed)])
    return EvalReport(summarize(episodes, levels), episodes)
