"""
Training a small collision encoder
==================================

Render a few hundred noisy depth images, train the variational encoder to
reconstruct their collision images, and compare against predicting the
average image. Uses ``artifacts/dce.ckpt`` for the last part when present.
"""

from pathlib import Path

import numpy as np

from dcenav.dce import (DceConfig, DceTrainConfig, blind_mean_mse, decode, encode,
                        gen_dce_dataset, heldout_mse, load_dce, train_dce)

ds = gen_dce_dataset(600, levels=(0, 10), seed=3)
print(f"{len(ds)} images, inputs {ds.inputs.shape}, {ds.masks.mean():.1%} valid target pixels")

cfg = DceConfig(latent_dim=32)
result = train_dce(ds, cfg, DceTrainConfig(epochs=6, batch_size=32, seed=0))
for h in result.history:
    print(f"epoch {h['epoch']}: recon {h['recon']:.4f}  kl {h['kl']:.2f}")

# The last 10% of a seeded shuffle is held out by train_dce.
n = len(ds)
perm = np.random.default_rng(0).permutation(n)
hold = ds.subset(perm[int(0.9 * n):])
train = ds.subset(perm[: int(0.9 * n)])
print("holdout", result.holdout)
print(f"blind-mean baseline {blind_mean_mse(train, hold, cfg.max_range):.4f}")

# Encoding gives a mean, a spread and a sample; decoding maps z back to metres.
code = encode(ds.inputs[0], result.model, seed=1)
print("latent", code.z.shape, "sigma range", float(code.sigma.min()), float(code.sigma.max()))
recon = decode(code.mu, result.model)
m = ds.masks[0] > 0
print(f"first image: mean |error| {np.abs(recon - ds.targets[0])[m].mean():.3f} m")

ckpt = Path(__file__).resolve().parents[1] / "artifacts" / "dce.ckpt"
if ckpt.exists():
    big = load_dce(ckpt)
    print(f"pretrained encoder on the same held-out images: {heldout_mse(big, hold):.4f}")
