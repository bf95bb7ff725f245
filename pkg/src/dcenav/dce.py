"""Deep collision encoder: a beta-VAE from depth images to collision images.

The encoder sees two channels, depth scaled by ``max_range`` (invalid pixels
as 0) and the validity mask, so "unknown" is distinguishable from "near".
The decoder reconstructs the collision image in the same normalised units;
its output is squashed into ``[min_range, max_range]``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from scipy.spatial.transform import Rotation

from . import neural
from .camera import (CameraIntrinsics, PaddedWorlds, SensorNoiseParams, apply_sensor_noise,
                     read_depth_png, read_raster, render_batch, resize_depth, write_raster)
from .collision_image import collision_image, valid_mask
from .world import RobotBox, WorldGenConfig, check_collision, generate_world

log = logging.getLogger(__name__)


class DceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DceConfig:
    latent_dim: int = 32
    beta_norm: float = 3.0
    width: int = 96
    height: int = 72
    channels: tuple[int, ...] = (16, 32, 64, 64)
    min_range: float = 0.2
    max_range: float = 10.0
    # "per_pixel": KL weight beta_norm / (H * W), i.e. the sum-of-squares
    # reconstruction scale; "literal": beta_norm against the per-pixel mean
    kl_weighting: str = "per_pixel"

    def __post_init__(self):
        if self.kl_weighting not in ("per_pixel", "literal"):
            raise ValueError(f"unknown kl_weighting {self.kl_weighting!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.beta_norm <= 0:
            raise ValueError("beta_norm must be positive")


@dataclass
class LatentCode:
    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor


def _stage_sizes(n: int, stages: int) -> list[int]:
    sizes = [n]
    for _ in range(stages):
        sizes.append((sizes[-1] + 1) // 2)
    return sizes


class DceModel(nn.Module):
    def __init__(self, config: DceConfig):
        super().__init__()
        self.config = config
        ch = (2,) + tuple(config.channels)
        self.enc = nn.ModuleList(
            nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(len(ch) - 1))
        hs = _stage_sizes(config.height, len(config.channels))
        ws = _stage_sizes(config.width, len(config.channels))
        self._hs, self._ws = hs, ws
        flat = ch[-1] * hs[-1] * ws[-1]
        self.mu_head = nn.Linear(flat, config.latent_dim)
        self.logvar_head = nn.Linear(flat, config.latent_dim)
        self.dec_in = nn.Linear(config.latent_dim, flat)
        dch = tuple(reversed(config.channels)) + (1,)
        self.dec = nn.ModuleList()
        n = len(config.channels)
        for i in range(n):
            h_in, h_out = hs[n - i], hs[n - i - 1]
            w_in, w_out = ws[n - i], ws[n - i - 1]
            op = (h_out - 2 * h_in + 1, w_out - 2 * w_in + 1)
            self.dec.append(nn.ConvTranspose2d(dch[i], dch[i + 1], 3, stride=2, padding=1,
                                               output_padding=op))

    def encode_stats(self, x):
        """Normalised two-channel input (B, 2, H, W) -> (mu, logvar)."""
        for conv in self.enc:
            x = neural.elu(conv(x))
        x = x.flatten(1)
        return self.mu_head(x), self.logvar_head(x)

    def decode_norm(self, z):
        """Latent -> collision image in units of ``max_range`` (B, H, W)."""
        c = self.config
        x = self.dec_in(z).view(z.shape[0], c.channels[-1], self._hs[-1], self._ws[-1])
        for i, deconv in enumerate(self.dec):
            x = deconv(neural.elu(x))
        lo = c.min_range / c.max_range
        return lo + (1.0 - lo) * torch.sigmoid(x[:, 0])

    def forward(self, x, eps):
        mu, logvar = self.encode_stats(x)
        z = neural.gaussian_sample(mu, logvar, eps)
        return self.decode_norm(z), mu, logvar


def preprocess(img, config: DceConfig) -> torch.Tensor:
    """Depth images in metres (H, W) or (B, H, W) -> network input (B, 2, H, W)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        img = img[None]
    if img.shape[-2:] != (config.height, config.width):
        raise DceError(f"image {img.shape[-2:]} does not match encoder input "
                       f"{(config.height, config.width)}")
    mask = (img != 0.0).astype(np.float32)
    depth = np.where(mask > 0, img / np.float32(config.max_range), np.float32(0.0))
    return torch.from_numpy(np.stack([depth, mask], axis=1).astype(np.float32))


@torch.no_grad()
def encode(img, model: DceModel, seed=None, eps: torch.Tensor | None = None) -> LatentCode:
    """Latent code of one image or a batch; ``z`` is drawn with ``seed`` (or ``eps``)."""
    model.eval()
    mu, logvar = model.encode_stats(preprocess(img, model.config))
    if eps is None:
        gen = torch.Generator().manual_seed(int(seed or 0))
        eps = torch.randn(mu.shape, generator=gen)
    sigma = torch.exp(0.5 * logvar)
    z = neural.gaussian_sample(mu, logvar, eps)
    if np.asarray(img).ndim == 2:
        return LatentCode(mu[0], sigma[0], z[0])
    return LatentCode(mu, sigma, z)


@torch.no_grad()
def decode(z, model: DceModel) -> np.ndarray:
    """Reconstructed collision image(s) in metres."""
    model.eval()
    z = torch.as_tensor(z, dtype=torch.float32)
    single = z.dim() == 1
    if z.shape[-1] != model.config.latent_dim:
        raise DceError(f"latent has length {z.shape[-1]}, expected {model.config.latent_dim}")
    out = model.decode_norm(z[None] if single else z) * model.config.max_range
    out = out.numpy()
    return out[0] if single else out


def kl_divergence(mu, sigma):
    """Summed KL of N(mu, sigma^2) from N(0, 1) over the last axis."""
    return -0.5 * torch.sum(1.0 + torch.log(sigma ** 2) - mu ** 2 - sigma ** 2, dim=-1)


def masked_mse(target, recon, mask):
    mask = mask.to(target.dtype)
    n = mask.sum()
    if n.item() == 0:
        raise DceError("mask selects no pixels; nothing to supervise")
    return torch.sum(mask * (target - recon) ** 2) / n


def dce_loss(x_coll, x_recon, mu, sigma, mask, beta_norm: float, kl_scale: float = 1.0):
    """Masked reconstruction MSE plus ``beta_norm * kl_scale`` times the batch-mean KL.

    Returns ``(total, recon, kl)``; all are differentiable tensors.
    """
    if x_coll.shape != x_recon.shape or x_coll.shape != mask.shape:
        raise DceError("dce_loss: image shapes differ")
    recon = masked_mse(x_coll, x_recon, mask)
    kl = kl_divergence(mu, sigma).mean()
    return recon + beta_norm * kl_scale * kl, recon, kl


def kl_scale_for(config: DceConfig) -> float:
    if config.kl_weighting == "literal":
        return 1.0
    return 1.0 / (config.width * config.height)


# -- datasets -------------------------------------------------------------------

@dataclass
class DceDataset:
    inputs: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    sources: list = field(default_factory=list)

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "DceDataset":
        return DceDataset(self.inputs[idx], self.targets[idx], self.masks[idx],
                          [self.sources[i] for i in np.arange(len(self))[idx]] if self.sources else [])

    def concat(self, other: "DceDataset") -> "DceDataset":
        return DceDataset(np.concatenate([self.inputs, other.inputs]),
                          np.concatenate([self.targets, other.targets]),
                          np.concatenate([self.masks, other.masks]),
                          list(self.sources) + list(other.sources))


def _random_camera(rng, world, robot: RobotBox, max_tilt: float):
    half = world.room_half - 0.4
    for _ in range(200):
        p = rng.uniform(-half, half)
        yaw = rng.uniform(-np.pi, np.pi)
        quat = Rotation.from_euler("zyx", [yaw, 0.0, 0.0]).as_quat()
        if not check_collision(world, p, quat, robot):
            break
    tilt = rng.uniform(-max_tilt, max_tilt, size=2)
    rot = Rotation.from_euler("z", yaw) * Rotation.from_euler("yx", tilt)
    return p, rot.as_matrix()


def gen_dce_dataset(n_images: int, levels=(0, 15), noise: SensorNoiseParams | None = None,
                    seed: int = 0, intr: CameraIntrinsics | None = None,
                    robot: RobotBox | None = None, world_config: WorldGenConfig | None = None,
                    max_tilt_deg: float = 10.0, chunk: int = 64) -> DceDataset:
    """Render noisy inputs and clean-render collision targets from random worlds.

    The supervision target is computed from the noise-free render; only the
    encoder input carries sensor noise and dropout.
    """
    intr = intr or CameraIntrinsics(96, 72)
    robot = robot or RobotBox()
    noise = noise if noise is not None else SensorNoiseParams()
    wcfg = world_config or WorldGenConfig(robot=robot)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDCE]))
    inputs, targets, masks, sources = [], [], [], []
    rays = intr.ray_directions()
    for start in range(0, n_images, chunk):
        m = min(chunk, n_images - start)
        worlds, pos, rots = [], np.zeros((m, 3)), np.zeros((m, 3, 3))
        for i in range(m):
            level = int(rng.integers(levels[0], levels[1] + 1))
            wseed = int(rng.integers(2**62))
            w = generate_world(level, wcfg, wseed)
            worlds.append(w)
            pos[i], rots[i] = _random_camera(rng, w, robot, np.radians(max_tilt_deg))
            sources.append(f"sim:level={level}:seed={wseed}")
        clean = render_batch(PaddedWorlds.from_worlds(worlds), pos, rots, intr, rays)
        target = collision_image(clean, intr, robot)
        noisy = apply_sensor_noise(clean, noise, rng, intr)
        inputs.append(noisy)
        targets.append(target)
        masks.append(valid_mask(target))
    return DceDataset(np.concatenate(inputs), np.concatenate(targets), np.concatenate(masks),
                      sources)


def ingest_real_images(paths, intr: CameraIntrinsics, robot: RobotBox | None = None,
                       native_intr: CameraIntrinsics | None = None) -> DceDataset:
    """Build samples from 16-bit millimetre depth PNGs.

    Images are resampled to ``intr`` resolution; the loss mask is the set of
    nonzero (measured) pixels of the resampled raster.
    """
    robot = robot or RobotBox()
    inputs, targets, masks = [], [], []
    for p in paths:
        img = read_depth_png(p, native_intr or intr)
        if img.shape != (intr.height, intr.width):
            img = resize_depth(img, intr.width, intr.height)
        inputs.append(img)
        targets.append(collision_image(img, intr, robot))
        masks.append(img != 0.0)
    return DceDataset(np.stack(inputs), np.stack(targets), np.stack(masks),
                      [f"real:{Path(p).name}" for p in paths])


def save_dataset(ds: DceDataset, directory, meta: dict | None = None) -> None:
    """Raster files per sample plus ``manifest.json``."""
    d = Path(directory)
    (d / "rasters").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(len(ds)):
        names = {k: f"rasters/{i:06d}_{k}.dpt" for k in ("input", "target", "mask")}
        write_raster(d / names["input"], ds.inputs[i])
        write_raster(d / names["target"], ds.targets[i])
        write_raster(d / names["mask"], ds.masks[i].astype(np.float32))
        entries.append({**names, "source": ds.sources[i] if ds.sources else ""})
    manifest = {"count": len(ds), "height": int(ds.inputs.shape[1]),
                "width": int(ds.inputs.shape[2]), "meta": meta or {}, "samples": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory) -> DceDataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    ins, tgs, mks, src = [], [], [], []
    for e in manifest["samples"]:
        ins.append(read_raster(d / e["input"]))
        tgs.append(read_raster(d / e["target"]))
        mks.append(read_raster(d / e["mask"]) > 0.5)
        src.append(e.get("source", ""))
    return DceDataset(np.stack(ins), np.stack(tgs), np.stack(mks), src)


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class DceTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    holdout_fraction: float = 0.1
    time_budget_s: float | None = None


@dataclass
class DceTrainResult:
    model: DceModel
    history: list
    holdout: dict


def blind_mean_mse(train: DceDataset, test: DceDataset, max_range: float) -> float:
    """Masked MSE (normalised units) of predicting the per-pixel training-set mean."""
    w = train.masks.astype(np.float64)
    mean = (train.targets * w).sum(0) / np.maximum(w.sum(0), 1.0)
    err = ((test.targets - mean) / max_range) ** 2
    return float((err * test.masks).sum() / test.masks.sum())


@torch.no_grad()
def heldout_mse(model: DceModel, ds: DceDataset, batch: int = 256) -> float:
    """Masked MSE (normalised units) of decoding the posterior mean."""
    model.eval()
    c = model.config
    num, den = 0.0, 0.0
    for s in range(0, len(ds), batch):
        x = preprocess(ds.inputs[s:s + batch], c)
        mu, _ = model.encode_stats(x)
        rec = model.decode_norm(mu).double().numpy()
        tgt = ds.targets[s:s + batch] / c.max_range
        m = ds.masks[s:s + batch]
        num += float((((tgt - rec) ** 2) * m).sum())
        den += float(m.sum())
    return num / den


def train_dce(dataset: DceDataset, config: DceConfig | None = None,
              train_config: DceTrainConfig | None = None) -> DceTrainResult:
    """Fit a DCE; the last ``holdout_fraction`` of a seeded shuffle is held out."""
    config = config or DceConfig()
    tc = train_config or DceTrainConfig()
    if len(dataset) == 0:
        raise DceError("empty dataset")
    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    order = rng.permutation(len(dataset))
    n_hold = int(len(dataset) * tc.holdout_fraction)
    if n_hold and len(dataset) - n_hold >= 1:
        train_ds, hold_ds = dataset.subset(order[:-n_hold]), dataset.subset(order[-n_hold:])
    else:
        train_ds, hold_ds = dataset, None
    model = DceModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    x_all = preprocess(train_ds.inputs, config)
    t_all = torch.from_numpy(train_ds.targets / np.float32(config.max_range))
    m_all = torch.from_numpy(train_ds.masks)
    history = []
    kl_scale = kl_scale_for(config)
    t0 = time.time()
    gen = torch.Generator().manual_seed(tc.seed)
    for epoch in range(tc.epochs):
        model.train()
        perm = rng.permutation(len(train_ds))
        tot = rec_tot = kl_tot = 0.0
        nb = 0
        for s in range(0, len(perm), tc.batch_size):
            idx = torch.from_numpy(perm[s:s + tc.batch_size])
            x, tgt, m = x_all[idx], t_all[idx], m_all[idx]
            mu, logvar = model.encode_stats(x)
            eps = torch.randn(mu.shape, generator=gen)
            z = neural.gaussian_sample(mu, logvar, eps)
            recon = model.decode_norm(z)
            loss, rec, kl = dce_loss(tgt, recon, mu, torch.exp(0.5 * logvar), m, config.beta_norm,
                                     kl_scale)
            if not torch.isfinite(loss):
                raise DceError(f"non-finite loss at epoch {epoch}, batch {nb}: "
                               f"recon={rec.item()}, kl={kl.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item()
            rec_tot += rec.item()
            kl_tot += kl.item()
            nb += 1
        history.append({"epoch": epoch, "loss": tot / nb, "recon": rec_tot / nb, "kl": kl_tot / nb,
                        "elapsed_s": time.time() - t0})
        log.info("dce epoch %d loss %.5f recon %.5f kl %.3f", epoch, tot / nb, rec_tot / nb, kl_tot / nb)
        if tc.time_budget_s is not None and time.time() - t0 > tc.time_budget_s:
            log.warning("dce training stopped by time budget after %d epochs", epoch + 1)
            break
    holdout = {}
    if hold_ds is not None:
        holdout = {"n": len(hold_ds), "mse": heldout_mse(model, hold_ds),
                   "baseline_mse": blind_mean_mse(train_ds, hold_ds, config.max_range)}
    return DceTrainResult(model, history, holdout)


def save_dce(model: DceModel, path, extra: dict | None = None) -> str:
    meta = {"kind": "dce", "config": asdict(model.config), **(extra or {})}
    return neural.save_checkpoint(path, model.state_dict(), meta)


def load_dce(path) -> DceModel:
    tensors, meta = neural.load_checkpoint(path)
    if meta.get("kind") != "dce":
        raise DceError(f"{path} is not a DCE checkpoint")
    cfg = dict(meta["config"])
    cfg["channels"] = tuple(cfg["channels"])
    model = DceModel(DceConfig(**cfg))
    model.load_state_dict(tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
