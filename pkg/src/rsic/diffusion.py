"""Conditional denoising diffusion over the latent space.

Provides the cumulative-signal noise schedule, the forward noising used for
training, a small convolutional noise predictor conditioned on the timestep
and a caption embedding, and classifier-free guidance with a spatially
varying scale. Captions are embedded through a learned table over the toy
corpus vocabulary; an empty caption maps to the reserved null row, which is
also used for the unconditional branch.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .autoencoder import LATENT_CHANNELS, TrainingDiverged, _gn

NULL_TOKEN = "<null>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients; alpha_bar[0] == 1, strictly decreasing."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 3:
            raise ValueError("schedule needs at least T_train=2 entries plus t=0")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0 or np.any(ab > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        object.__setattr__(self, "alpha_bar", ab)
        self.alpha_bar.setflags(write=False)

    @property
    def t_train(self) -> int:
        return len(self.alpha_bar) - 1


def make_schedule(t_train: int, kind: str = "cosine") -> NoiseSchedule:
    if t_train < 2:
        raise ValueError(f"t_train must be >= 2, got {t_train}")
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, t_train, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        t = np.arange(t_train + 1, dtype=np.float64) / t_train
        f = np.cos((t + s) / (1 + s) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(alpha_bar)


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t: int,
             noise: np.ndarray) -> np.ndarray:
    """Forward noising: sqrt(ab_t) z0 + sqrt(1 - ab_t) noise."""
    if not 0 <= t <= schedule.t_train:
        raise ValueError(f"t={t} outside [0, {schedule.t_train}]")
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {noise.shape} != latent shape {z0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def _sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _FilmBlock(nn.Module):
    def __init__(self, c, emb_dim):
        super().__init__()
        self.norm1 = _gn(c)
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * c)
        self.norm2 = _gn(c)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = h * (1.0 + scale) + shift
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class EpsilonNet(nn.Module):
    """Noise predictor: (latent, timestep, condition vector) -> noise estimate."""

    def __init__(self, vocab_size: int, width: int = 64, cond_dim: int = 32,
                 time_dim: int = 64, blocks: int = 3):
        super().__init__()
        self.width = width
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.embedding = nn.Embedding(vocab_size, cond_dim)
        emb_dim = 4 * cond_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb_dim), nn.SiLU(),
                                      nn.Linear(emb_dim, emb_dim))
        self.cond_mlp = nn.Linear(cond_dim, emb_dim)
        self.stem = nn.Conv2d(LATENT_CHANNELS, width, 3, padding=1)
        self.blocks = nn.ModuleList(_FilmBlock(width, emb_dim) for _ in range(blocks))
        self.head = nn.Sequential(_gn(width), nn.SiLU(),
                                  nn.Conv2d(width, LATENT_CHANNELS, 3, padding=1))

    def forward(self, z, t, cond_vec):
        emb = self.time_mlp(_sinusoidal_embedding(t, self.time_dim))
        emb = emb + self.cond_mlp(cond_vec)
        h = self.stem(z)
        for blk in self.blocks:
            h = blk(h, emb)
        return self.head(h)


def tokenize(caption: str) -> list[str]:
    return re.findall(r"[a-z]+", caption.lower())


@dataclass
class EpsilonModel:
    """Frozen noise predictor with its caption vocabulary and schedule config."""

    net: EpsilonNet
    vocab: list[str]  # index 0 is NULL_TOKEN, 1 is UNK_TOKEN
    config: dict
    hash8: bytes = b"\x00" * 8

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.vocab)}

    def null_condition(self) -> np.ndarray:
        """The reserved unconditional embedding."""
        with torch.no_grad():
            return self.net.embedding.weight[0].numpy().copy()

    def embed_caption(self, caption: str | None) -> np.ndarray:
        """Mean of word embeddings; empty or missing captions map to NULL."""
        if caption is None or not tokenize(caption):
            return self.null_condition()
        idx = [self._index.get(w, 1) for w in tokenize(caption)]
        with torch.no_grad():
            return self.net.embedding(torch.tensor(idx)).mean(dim=0).numpy().copy()

    def schedule(self) -> NoiseSchedule:
        return make_schedule(int(self.config["t_train"]), self.config["schedule"])

    def save(self, path) -> bytes:
        tensors = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        cfg = dict(self.config)
        cfg["vocab"] = self.vocab
        self.hash8 = ckpt.save_checkpoint(path, "diffusion", cfg, tensors)
        return self.hash8

    @classmethod
    def load(cls, path) -> "EpsilonModel":
        c = ckpt.load_checkpoint(path)
        if c.kind != "diffusion":
            raise ckpt.CheckpointError(f"expected a diffusion checkpoint, got {c.kind!r}")
        vocab = list(c.config.pop("vocab"))
        net = EpsilonNet(vocab_size=len(vocab), width=int(c.config["width"]),
                         cond_dim=int(c.config["cond_dim"]),
                         time_dim=int(c.config["time_dim"]),
                         blocks=int(c.config["blocks"]))
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in c.tensors.items()})
        net.eval()
        return cls(net, vocab, c.config, c.hash8)


def _to_latent_torch(z: np.ndarray) -> torch.Tensor:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 3 or z.shape[2] != LATENT_CHANNELS:
        raise ValueError(f"expected (h, w, {LATENT_CHANNELS}) latent, got {z.shape}")
    return torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1)))[None]


def predict_noise(model: EpsilonModel, z: np.ndarray, t: int,
                  c: np.ndarray | None = None) -> np.ndarray:
    """Deterministic noise prediction; c=None selects the NULL branch."""
    zt = _to_latent_torch(z)
    vec = model.null_condition() if c is None else np.asarray(c, dtype=np.float32)
    model.net.eval()
    with torch.no_grad():
        out = model.net(zt, torch.tensor([t]), torch.from_numpy(vec.astype(np.float32))[None])
    return out[0].numpy().transpose(1, 2, 0)


def cfg_noise(model: EpsilonModel, z: np.ndarray, t: int, c: np.ndarray | None,
              omega_map: np.ndarray) -> np.ndarray:
    """Classifier-free guided noise with a per-position guidance scale.

    Blends the unconditional and conditional predictions elementwise:
    eps_null + omega * (eps_cond - eps_null), with ``omega_map`` of shape
    (h, w) broadcast across channels. Computed as a convex-form mix so that
    omega == 1 reproduces the conditional branch bit-exactly and omega == 0
    the unconditional one.
    """
    omega_map = np.asarray(omega_map, dtype=np.float64)
    if omega_map.shape != z.shape[:2]:
        raise ValueError(f"omega map {omega_map.shape} != latent grid {z.shape[:2]}")
    eps_null = predict_noise(model, z, t, None).astype(np.float64)
    eps_cond = predict_noise(model, z, t, c).astype(np.float64)
    w = omega_map[:, :, None]
    return (1.0 - w) * eps_null + w * eps_cond


@dataclass
class DiffusionTrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-4
    width: int = 64
    cond_dim: int = 32
    time_dim: int = 64
    blocks: int = 3
    t_train: int = 1000
    schedule: str = "cosine"
    cond_dropout: float = 0.1
    log_every: int = 0


def build_vocab(captions: list[str]) -> list[str]:
    words = sorted({w for cap in captions for w in tokenize(cap)})
    return [NULL_TOKEN, UNK_TOKEN] + words


def train_epsilon(latents: np.ndarray, captions: list[str],
                  config: DiffusionTrainConfig) -> EpsilonModel:
    """Standard noise-prediction training with condition dropout."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise ValueError("need a non-empty (N, h, w, 4) latent stack")
    if len(captions) != len(latents):
        raise ValueError("captions and latents differ in length")
    if config.steps <= 0:
        raise ValueError("steps must be positive")

    schedule = make_schedule(config.t_train, config.schedule)
    vocab = build_vocab(captions)
    index = {w: i for i, w in enumerate(vocab)}
    token_ids = [[index.get(w, 1) for w in tokenize(cap)] or [0] for cap in captions]

    torch.manual_seed(config.seed)
    net = EpsilonNet(vocab_size=len(vocab), width=config.width,
                     cond_dim=config.cond_dim, time_dim=config.time_dim,
                     blocks=config.blocks)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)

    z_all = torch.from_numpy(latents.transpose(0, 3, 1, 2))
    sqrt_ab = torch.from_numpy(np.sqrt(schedule.alpha_bar)).float()
    sqrt_1mab = torch.from_numpy(np.sqrt(1.0 - schedule.alpha_bar)).float()

    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(latents), config.batch_size)
        z0 = z_all[idx]
        t = torch.from_numpy(rng.integers(1, config.t_train + 1, config.batch_size))
        noise = torch.from_numpy(
            rng.standard_normal(z0.shape, dtype=np.float32))
        zt = sqrt_ab[t][:, None, None, None] * z0 + sqrt_1mab[t][:, None, None, None] * noise

        cond = torch.zeros(config.batch_size, config.cond_dim)
        drop = rng.random(config.batch_size) < config.cond_dropout
        for b in range(config.batch_size):
            ids = [0] if drop[b] else token_ids[idx[b]]
            cond[b] = net.embedding(torch.tensor(ids)).mean(dim=0)

        pred = net(zt, t, cond)
        loss = torch.mean((pred - noise) ** 2)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(losses[-config.log_every:]))
            print(f"[diffusion] step {step + 1}/{config.steps} mse {recent:.5f}")

    cfg = {
        "width": config.width, "cond_dim": config.cond_dim,
        "time_dim": config.time_dim, "blocks": config.blocks,
        "t_train": config.t_train, "schedule": config.schedule,
        "seed": config.seed, "steps": config.steps, "lr": config.lr,
        "cond_dropout": config.cond_dropout,
        "final_loss": round(float(np.mean(losses[-50:])), 6),
    }
    return EpsilonModel(net.eval(), vocab, cfg)
