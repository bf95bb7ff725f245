"""Command-line entry points.

Every subcommand reads one YAML config (``--config``) plus flag overrides
and writes into a run directory (``--out``) holding a snapshot of the
resolved config and a ``run.json`` with seeds and checksums.

Exit codes: 0 ok, 1 user error (bad config, missing file), 2 internal error.
Set ``DCENAV_WORKERS`` to cap the number of compute threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, SensorNoiseParams, write_depth_png, write_raster
from .config import ConfigError, dump_config, load_config
from .dce import DceConfig, DceError, DceTrainConfig
from .env import EnvConfig
from .neural import CheckpointError, file_sha256
from .vehicle import ActionLimits

log = logging.getLogger("dcenav")


class UserError(Exception):
    pass


@dataclass(frozen=True)
class DatasetRunConfig:
    n_images: int = 2000
    levels: tuple = (0, 15)
    seed: int = 0
    width: int = 96
    height: int = 72
    max_tilt_deg: float = 10.0
    noise: SensorNoiseParams = field(default_factory=SensorNoiseParams)


@dataclass(frozen=True)
class DceRunConfig:
    dataset: str = ""
    model: DceConfig = field(default_factory=DceConfig)
    train: DceTrainConfig = field(default_factory=DceTrainConfig)


@dataclass(frozen=True)
class EvalRunConfig:
    checkpoint: str = ""
    dce_checkpoint: str = ""
    levels: tuple = (0, 5, 10)
    runs: int = 200
    seed: int = 0
    n_envs: int = 64
    limits: ActionLimits = field(default_factory=ActionLimits)
    env: EnvConfig = field(default_factory=EnvConfig)


@dataclass(frozen=True)
class RenderDebugConfig:
    dce_checkpoint: str = ""
    level: int = 5
    seed: int = 0


@dataclass(frozen=True)
class BenchConfig:
    frames: int = 200
    warmup: int = 20
    width: int = 160
    height: int = 120
    latent_dim: int = 32
    dce_checkpoint: str = ""
    policy_checkpoint: str = ""
    seed: int = 0


def _levels(text: str):
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated integers, got {text!r}")


def _need_file(path, what: str) -> Path:
    if not path:
        raise UserError(f"no {what} given; set it in the config file")
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} {p} not found")
    return p


def _run_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_meta(out: Path, command: str, cfg, inputs=(), outputs=(), extra=None) -> None:
    dump_config(cfg, out / "config.yaml")
    meta = {"command": command, "argv": sys.argv[1:], "python": platform.python_version(),
            "inputs": {str(p): file_sha256(p) for p in inputs if Path(p).is_file()},
            "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).is_file()},
            **(extra or {})}
    (out / "run.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


# -- subcommands -----------------------------------------------------------------

def cmd_gen_dataset(args) -> None:
    from .dce import gen_dce_dataset, save_dataset
    cfg = load_config(DatasetRunConfig, args.config, {"seed": args.seed, "levels": args.levels,
                                                      "n_images": args.runs})
    if len(cfg.levels) != 2:
        raise UserError("gen-dataset --levels takes a range: LO,HI")
    out = _run_dir(args, "runs/dataset")
    ds = gen_dce_dataset(cfg.n_images, cfg.levels, cfg.noise, cfg.seed,
                         CameraIntrinsics(cfg.width, cfg.height), max_tilt_deg=cfg.max_tilt_deg)
    save_dataset(ds, out / "data", {"seed": cfg.seed, "levels": list(cfg.levels)})
    _write_run_meta(out, "gen-dataset", cfg, outputs=[out / "data" / "manifest.json"],
                    extra={"seed": cfg.seed})
    print(f"wrote {len(ds)} images to {out / 'data'}")


def cmd_train_dce(args) -> None:
    from .dce import load_dataset, save_dce, train_dce
    cfg = load_config(DceRunConfig, args.config)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    data = _need_file(cfg.dataset, "dataset directory")
    out = _run_dir(args, "runs/dce")
    res = train_dce(load_dataset(data), cfg.model, cfg.train)
    ckpt = out / "dce.ckpt"
    save_dce(res.model, ckpt, {"holdout": res.holdout, "seed": cfg.train.seed})
    (out / "history.json").write_text(json.dumps(res.history, indent=1) + "\n")
    _write_run_meta(out, "train-dce", cfg, inputs=[data / "manifest.json"], outputs=[ckpt],
                    extra={"holdout": res.holdout, "seed": cfg.train.seed})
    print(f"held-out masked MSE {res.holdout.get('mse', float('nan')):.5f} "
          f"(blind-mean baseline {res.holdout.get('baseline_mse', float('nan')):.5f}); wrote {ckpt}")


def cmd_train_rl(args) -> None:
    from .trainer import TrainConfig, train
    cfg = load_config(TrainConfig, args.config, {"seed": args.seed})
    _need_file(cfg.dce_checkpoint, "DCE checkpoint")
    out = _run_dir(args, "runs/rl")
    if args.resume:
        _need_file(Path(args.resume) / "resume.pkl", "resume state")
    dump_config(cfg, out / "config.yaml")
    trainer = train(cfg, out, resume_from=args.resume)
    _write_run_meta(out, "train-rl", cfg, inputs=[cfg.dce_checkpoint],
                    outputs=[out / "final" / "policy.ckpt", out / "metrics.csv"],
                    extra={"seed": cfg.seed, "env_steps": trainer.env_steps,
                           "final_level": trainer.curriculum.level})
    print(f"trained {trainer.env_steps} env steps; curriculum level {trainer.curriculum.level}; "
          f"policy at {out / 'final' / 'policy.ckpt'}")


def cmd_eval(args) -> None:
    from .dce import load_dce
    from .harness import eval_policy
    cfg = load_config(EvalRunConfig, args.config, {"seed": args.seed, "levels": args.levels,
                                                   "runs": args.runs, "checkpoint": args.checkpoint})
    ckpt = _need_file(cfg.checkpoint, "policy checkpoint")
    dce = load_dce(_need_file(cfg.dce_checkpoint, "DCE checkpoint")) if cfg.dce_checkpoint else None
    out = _run_dir(args, "runs/eval")
    report = eval_policy(ckpt, cfg.levels, cfg.runs, cfg.limits, cfg.seed, dce=dce,
                         env_config=cfg.env, n_envs=cfg.n_envs)
    report.write(out)
    _write_run_meta(out, "eval", cfg, inputs=[ckpt] + ([cfg.dce_checkpoint] if cfg.dce_checkpoint else []),
                    outputs=[out / "report.csv", out / "episodes.csv"], extra={"seed": cfg.seed})
    print(report.to_table(), end="")


def cmd_render_debug(args) -> None:
    import torch
    from .collision_image import collision_image
    from .dce import decode, encode, load_dce
    from .env import VecNavEnv
    cfg = load_config(RenderDebugConfig, args.config, {"seed": args.seed,
                                                       "level": args.levels[0] if args.levels else None})
    dce = load_dce(_need_file(cfg.dce_checkpoint, "DCE checkpoint"))
    intr = CameraIntrinsics(dce.config.width, dce.config.height)
    env = VecNavEnv(EnvConfig(camera=intr), dce, 1)
    env.reset([cfg.level], [cfg.seed])
    depth = env.render()[0]
    coll = collision_image(depth, intr, env.config.robot)
    with torch.no_grad():
        recon = decode(encode(depth, dce).mu, dce)
    out = _run_dir(args, "runs/render-debug")
    for name, img in (("depth", depth), ("collision", coll), ("reconstruction", recon)):
        write_raster(out / f"{name}.f32", img)
        write_depth_png(out / f"{name}.png", img)
    strip = np.concatenate([depth, coll, recon], axis=1)
    write_depth_png(out / "side_by_side.png", strip)
    _write_run_meta(out, "render-debug", cfg, inputs=[cfg.dce_checkpoint],
                    outputs=[out / "side_by_side.png"], extra={"seed": cfg.seed})
    print(f"wrote depth, collision and reconstruction rasters to {out}")


def cmd_bench_latency(args) -> None:
    import torch
    from .dce import DceModel, load_dce, preprocess
    from .trainer import PolicyNet, load_policy
    cfg = load_config(BenchConfig, args.config, {"seed": args.seed})
    torch.manual_seed(cfg.seed)
    if cfg.dce_checkpoint:
        dce = load_dce(_need_file(cfg.dce_checkpoint, "DCE checkpoint"))
    else:
        dce = DceModel(DceConfig(latent_dim=cfg.latent_dim, width=cfg.width, height=cfg.height)).eval()
    J = dce.config.latent_dim
    if cfg.policy_checkpoint:
        policy, _ = load_policy(_need_file(cfg.policy_checkpoint, "policy checkpoint"))
    else:
        policy = PolicyNet(15 + J).eval()
    rng = np.random.default_rng(cfg.seed)
    frames = rng.uniform(0.2, 10.0, (cfg.frames + cfg.warmup, dce.config.height, dce.config.width))
    frames = frames.astype(np.float32)
    state = torch.zeros(1, 15)
    h = policy.initial_hidden(1)
    times = []
    with torch.no_grad():
        for i, img in enumerate(frames):
            t0 = time.perf_counter()
            mu, _ = dce.encode_stats(preprocess(img, dce.config))
            mean, _, h = policy.step(torch.cat([state, mu], dim=1), h)
            torch.tanh(mean)
            if i >= cfg.warmup:
                times.append(1e3 * (time.perf_counter() - t0))
    t = np.array(times)
    stats = {"frames": len(t), "width": dce.config.width, "height": dce.config.height,
             "latent_dim": J, "mean_ms": float(t.mean()), "median_ms": float(np.median(t)),
             "p95_ms": float(np.percentile(t, 95)), "max_ms": float(t.max()),
             "threads": torch.get_num_threads()}
    out = _run_dir(args, "runs/bench-latency")
    (out / "latency.json").write_text(json.dumps(stats, indent=2) + "\n")
    _write_run_meta(out, "bench-latency", cfg, extra=stats)
    print(f"encode+policy per frame at {stats['width']}x{stats['height']}: mean {stats['mean_ms']:.2f} ms, "
          f"median {stats['median_ms']:.2f} ms, p95 {stats['p95_ms']:.2f} ms over {stats['frames']} frames")


COMMANDS = {
    "gen-dataset": (cmd_gen_dataset, "render simulated depth images and collision-image targets"),
    "train-dce": (cmd_train_dce, "train the collision encoder on a generated dataset"),
    "train-rl": (cmd_train_rl, "train the navigation policy with PPO and the curriculum"),
    "eval": (cmd_eval, "evaluate a policy over curriculum levels"),
    "render-debug": (cmd_render_debug, "write depth, collision image and reconstruction for a scene"),
    "bench-latency": (cmd_bench_latency, "time encoder + policy inference per frame"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcenav", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML config file (unknown keys are rejected)")
        p.add_argument("--seed", type=int)
        p.add_argument("--levels", type=_levels, help="comma-separated curriculum levels")
        p.add_argument("--runs", type=int, help="runs per level (eval) or image count (gen-dataset)")
        p.add_argument("--out", help="run directory")
        if name == "eval":
            p.add_argument("--checkpoint", help="policy checkpoint (overrides the config)")
        if name == "train-rl":
            p.add_argument("--resume", help="checkpoint directory to resume from")
    return parser


def _apply_workers() -> None:
    n = os.environ.get("DCENAV_WORKERS")
    if not n:
        return
    try:
        n = int(n)
    except ValueError:
        raise UserError(f"DCENAV_WORKERS must be an integer, got {n!r}")
    import numba
    import torch
    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _apply_workers()
        COMMANDS[args.command][0](args)
    except (UserError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"dcenav {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        from .harness import EvalError
        from .trainer import TrainingError
        if isinstance(exc, (EvalError, TrainingError, DceError)):
            print(f"dcenav {args.command}: error: {exc}", file=sys.stderr)
            return 1
        traceback.print_exc()
        print(f"dcenav {args.command}: internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
