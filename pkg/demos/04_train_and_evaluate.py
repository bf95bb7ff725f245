"""
Training and evaluating a navigation policy
===========================================

A few PPO updates with a freshly trained tiny encoder, just to show the
moving parts. The real run is ``dcenav train-rl --config configs/train_rl.yaml``
and takes about an hour on one CPU core; if its output is in ``artifacts/rl``
this script also evaluates that policy.
"""

import tempfile
from pathlib import Path

from dcenav.dce import DceConfig, DceTrainConfig, gen_dce_dataset, train_dce
from dcenav.env import EnvConfig, RewardParams
from dcenav.harness import eval_policy
from dcenav.trainer import TrainConfig, train

ROOT = Path(__file__).resolve().parents[1]

dce = train_dce(gen_dce_dataset(200, seed=0), DceConfig(latent_dim=32),
                DceTrainConfig(epochs=2, batch_size=32)).model

env = EnvConfig(reward=RewardParams(level_offset=1.0, progress_sign=-1.0))
cfg = TrainConfig(n_envs=8, rollout=32, total_steps=8 * 32 * 6, env=env)

with tempfile.TemporaryDirectory() as out:
    trainer = train(cfg, out, dce=dce)
    print((Path(out) / "metrics.csv").read_text())
    report = eval_policy(Path(out) / "final" / "policy.ckpt", levels=[0, 5], runs_per_level=8,
                         dce=dce, env_config=env, n_envs=8)
    print(report.to_table())

ckpt = ROOT / "artifacts" / "rl" / "final" / "policy.ckpt"
if ckpt.exists():
    # The checkpoint remembers which encoder it was trained with.
    report = eval_policy(ckpt, levels=[0, 5, 10], runs_per_level=32, seed=2024,
                         env_config=env, n_envs=32)
    print("trained policy:")
    print(report.to_table())
