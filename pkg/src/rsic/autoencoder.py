"""Deterministic 8x image autoencoder over a 4-channel latent space.

Three strided stages map (H, W, 3) images to (H/8, W/8, 4) latents and a
mirrored decoder maps back. Latents handed to the rest of the pipeline are
normalized to unit global variance; the scale factor and per-channel
statistics are recorded in the checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .data import validate_image

LATENT_CHANNELS = 4
DOWNSAMPLE = 8


class TrainingDiverged(RuntimeError):
    pass


def _gn(c):
    groups = next(g for g in (8, 4, 2, 1) if c % g == 0)
    return nn.GroupNorm(groups, c)


class _ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            _gn(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
            _gn(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class AutoencoderNet(nn.Module):
    """Strided conv encoder (3 stages of 2x) and mirrored decoder.

    Channel widths are (w, 2w, 3w) across the three stages; compute is kept
    at the lower resolutions so training stays tractable on one CPU core.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1), _gn(w), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), _gn(2 * w), nn.SiLU(),
            _ResBlock(2 * w),
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1), _gn(3 * w), nn.SiLU(),
            _ResBlock(3 * w),
            _ResBlock(3 * w),
            nn.Conv2d(3 * w, LATENT_CHANNELS, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, 3 * w, 3, padding=1), _gn(3 * w), nn.SiLU(),
            _ResBlock(3 * w),
            _ResBlock(3 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(3 * w, 2 * w, 3, padding=1), _gn(2 * w), nn.SiLU(),
            _ResBlock(2 * w),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1), _gn(w), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(w, w, 3, padding=1), _gn(w), nn.SiLU(),
            nn.Conv2d(w, 3, 3, padding=1),
        )


@dataclass
class AutoencoderModel:
    """Frozen autoencoder plus its config and checkpoint identity."""

    net: AutoencoderNet
    config: dict
    hash8: bytes = b"\x00" * 8

    @property
    def latent_scale(self) -> float:
        return float(self.config["latent_scale"])

    def save(self, path) -> bytes:
        tensors = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        self.hash8 = ckpt.save_checkpoint(path, "autoencoder", self.config, tensors)
        return self.hash8

    @classmethod
    def load(cls, path) -> "AutoencoderModel":
        c = ckpt.load_checkpoint(path)
        if c.kind != "autoencoder":
            raise ckpt.CheckpointError(f"expected an autoencoder checkpoint, got {c.kind!r}")
        net = AutoencoderNet(width=int(c.config["width"]))
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in c.tensors.items()})
        net.eval()
        return cls(net, c.config, c.hash8)


def _to_torch_image(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]


def encode_image(model: AutoencoderModel, x: np.ndarray) -> np.ndarray:
    """Image (H, W, 3) in [0, 1] -> normalized latent (H/8, W/8, 4)."""
    x = validate_image(x)
    model.net.eval()
    with torch.no_grad():
        z = model.net.encoder(_to_torch_image(x))
    z = z[0].numpy().transpose(1, 2, 0) / model.latent_scale
    return np.ascontiguousarray(z, dtype=np.float32)


def decode_latent(model: AutoencoderModel, z: np.ndarray) -> np.ndarray:
    """Normalized latent (h, w, 4) -> image (8h, 8w, 3), clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 3 or z.shape[2] != LATENT_CHANNELS:
        raise ValueError(f"expected (h, w, {LATENT_CHANNELS}) latent, got {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("latent contains non-finite values")
    model.net.eval()
    zt = torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1)))[None] * model.latent_scale
    with torch.no_grad():
        x = model.net.decoder(zt)
    return np.clip(x[0].numpy().transpose(1, 2, 0), 0.0, 1.0).astype(np.float32)


@dataclass
class AutoencoderTrainConfig:
    seed: int = 0
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1.5e-3
    width: int = 16
    crop: int | None = 64  # train on random square crops; None uses full frames
    val_fraction: float = 0.1
    max_val_mse: float | None = None
    log_every: int = 0  # epochs between log lines; 0 silences


def train_autoencoder(images: np.ndarray,
                      config: AutoencoderTrainConfig) -> AutoencoderModel:
    """Train on a stack of (N, H, W, 3) images; seed-reproducible."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty (N, H, W, 3) image stack")
    if config.epochs <= 0:
        raise ValueError("epochs must be positive")

    torch.manual_seed(config.seed)
    net = AutoencoderNet(width=config.width)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=config.epochs, eta_min=config.lr * 0.05)
    rng = np.random.default_rng(config.seed)

    n_val = max(1, int(len(images) * config.val_fraction)) if len(images) > 1 else 0
    perm = rng.permutation(len(images))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
    x_all = torch.from_numpy(images.transpose(0, 3, 1, 2))

    crop = config.crop
    if crop is not None and (crop > min(images.shape[1:3]) or crop % 8):
        raise ValueError(f"crop {crop} must be a multiple of 8 within the frame")

    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        nb = 0
        for i in range(0, len(order), config.batch_size):
            xb = x_all[order[i:i + config.batch_size]]
            if crop is not None and crop < images.shape[1]:
                ys = rng.integers(0, images.shape[1] - crop + 1, len(xb))
                xs = rng.integers(0, images.shape[2] - crop + 1, len(xb))
                xb = torch.stack([xb[b, :, ys[b]:ys[b] + crop, xs[b]:xs[b] + crop]
                                  for b in range(len(xb))])
            z = net.encoder(xb)
            out = net.decoder(z)
            loss = torch.mean((out - xb) ** 2)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            nb += 1
        sched.step()
        losses.append(epoch_loss / max(nb, 1))
        if config.log_every and (epoch + 1) % config.log_every == 0:
            print(f"[autoencoder] epoch {epoch + 1}/{config.epochs} "
                  f"train mse {losses[-1]:.5f}")

    net.eval()
    with torch.no_grad():
        val_sel = val_idx[:64] if n_val else train_idx[:1]
        sq_sum, n_px = 0.0, 0
        for i in range(0, len(val_sel), config.batch_size):
            vx = x_all[val_sel[i:i + config.batch_size]]
            sq_sum += float(((net.decoder(net.encoder(vx)) - vx) ** 2).sum())
            n_px += vx.numel()
        val_mse = sq_sum / n_px
        z_train = []
        for i in range(0, min(len(train_idx), 256), config.batch_size):
            z_train.append(net.encoder(x_all[train_idx[i:i + config.batch_size]]))
        z_cat = torch.cat(z_train)
        latent_scale = float(z_cat.std())
        channel_std = [float(s) for s in z_cat.std(dim=(0, 2, 3))]

    if config.max_val_mse is not None and val_mse > config.max_val_mse:
        raise TrainingDiverged(
            f"held-out mse {val_mse:.5f} above threshold {config.max_val_mse}")

    cfg = {
        "width": config.width,
        "seed": config.seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "batch_size": config.batch_size,
        "latent_scale": max(latent_scale, 1e-8),
        "channel_std": channel_std,
        "train_loss": [round(v, 8) for v in losses],
        "val_mse": round(val_mse, 8),
    }
    return AutoencoderModel(net.eval(), cfg)
