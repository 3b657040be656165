"""Hierarchical spatially variable-rate latent codec.

Four analysis blocks (each a 2x downsampling) turn a latent into coded
feature maps at progressively coarser scales; importance-map gating decides
per position how many scales carry information, and each scale's entropy
parameters are predicted from the already-decoded coarser scales plus the
importance map. Rate allocation and feature content are both modulated by
the map through spatial feature transform (SFT) layers.

Coding pipeline per scale, coarsest first: predict (mean, scale), round the
mean-subtracted feature to integers, range-code the integers against a
discretized Gaussian from a fixed scale table. Gated positions always code
the distribution mode (integer zero), which costs a fraction of a bit per
symbol, so the decoder never needs an occupancy side channel. Symbols are
laid out row-major with channels fastest; each scale is one independent
range-coded stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from . import entropy_coder as ec
from . import weight_map as wm
from .autoencoder import LATENT_CHANNELS, TrainingDiverged, _gn
from .weight_map import WeightMap, lambda_of, scales_enabled

NUM_SCALES = 4
SCALE_TABLE = np.exp(np.linspace(np.log(0.03), np.log(16.0), 64))
_MIN_SIGMA = float(SCALE_TABLE[0])
_MAX_SIGMA = float(SCALE_TABLE[-1])
# Symbol support radius per scale-table bin.
SUPPORT_TABLE = np.maximum(2, np.minimum(64, np.ceil(4.0 * SCALE_TABLE))).astype(np.int64)


class CodecError(ValueError):
    pass


def _bin_support(bin_idx: int) -> int:
    return int(SUPPORT_TABLE[bin_idx])


@lru_cache(maxsize=None)
def _bin_dist(bin_idx: int) -> ec.SymbolDistribution:
    r = _bin_support(bin_idx)
    return ec.SymbolDistribution.gaussian(0.0, float(SCALE_TABLE[bin_idx]), -r, r)


def _sigma_bins(sigma: np.ndarray) -> np.ndarray:
    """Smallest table entry >= sigma (conservative widening)."""
    return np.clip(np.searchsorted(SCALE_TABLE, sigma - 1e-9, side="left"),
                   0, len(SCALE_TABLE) - 1)


class _Sft(nn.Module):
    """Spatial feature transform: per-position scale/shift from the map."""

    def __init__(self, channels, cond_width=16):
        super().__init__()
        self.cond = nn.Sequential(
            nn.Conv2d(1, cond_width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(cond_width, 2 * channels, 3, padding=1))

    def forward(self, x, m):
        scale, shift = self.cond(m).chunk(2, dim=1)
        return x * (1.0 + scale) + shift


class _AnalysisBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2)
        self.sft = _Sft(c_out)
        self.body = nn.Sequential(_gn(c_out), nn.SiLU(),
                                  nn.Conv2d(c_out, c_out, 3, padding=1))

    def forward(self, x, m):
        h = self.down(x)
        h = self.sft(h, m)
        return self.skip(x) + self.body(h)


class _SynthesisBlock(nn.Module):
    """Upsample to a target shape, then SFT-conditioned refinement."""

    def __init__(self, c):
        super().__init__()
        self.up = nn.Conv2d(c, c, 3, padding=1)
        self.sft = _Sft(c)
        self.body = nn.Sequential(_gn(c), nn.SiLU(),
                                  nn.Conv2d(c, c, 3, padding=1))

    def forward(self, x, m, target_hw):
        x = F.interpolate(x, size=target_hw, mode="nearest")
        h = self.up(x)
        h = self.sft(h, m)
        return x + self.body(h)


class _Prior(nn.Module):
    """Entropy parameters (mean, scale) from decoded coarser scales plus the map."""

    def __init__(self, c_in, hidden, c_out):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * c_out, 1))

    def forward(self, x):
        mu, raw = self.net(x).chunk(2, dim=1)
        sigma = torch.clamp(F.softplus(raw) + 1e-3, _MIN_SIGMA, _MAX_SIGMA)
        return mu, sigma


class HsvlcNet(nn.Module):
    def __init__(self, num_scales: int = NUM_SCALES, hidden: int = 64,
                 bottleneck: int = 32):
        super().__init__()
        if num_scales not in (1, NUM_SCALES):
            raise CodecError(f"num_scales must be 1 or {NUM_SCALES}")
        self.num_scales = num_scales
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.analysis = nn.ModuleList(
            _AnalysisBlock(LATENT_CHANNELS if i == 0 else hidden, hidden)
            for i in range(num_scales))
        self.heads = nn.ModuleList(
            nn.Conv2d(hidden, bottleneck, 1) for _ in range(num_scales))
        self.merges = nn.ModuleList(
            nn.Conv2d(bottleneck, hidden, 1) for _ in range(num_scales))
        self.synthesis = nn.ModuleList(_SynthesisBlock(hidden) for _ in range(num_scales))
        self.out = nn.Sequential(_gn(hidden), nn.SiLU(),
                                 nn.Conv2d(hidden, LATENT_CHANNELS, 3, padding=1))
        self.priors = nn.ModuleList(
            _Prior(bottleneck * (num_scales - 1 - i) + 1, hidden, bottleneck)
            for i in range(num_scales))

    def feature_shapes(self, latent_hw) -> list[tuple[int, int]]:
        """Per-scale spatial shapes: repeated halving (ceil), clamped at 1."""
        h, w = latent_hw
        shapes = []
        for _ in range(self.num_scales):
            h, w = max(1, (h + 1) // 2), max(1, (w + 1) // 2)
            shapes.append((h, w))
        return shapes

    @staticmethod
    def m_at(m_latent: torch.Tensor, shape) -> torch.Tensor:
        return F.adaptive_avg_pool2d(m_latent, shape)

    def extract(self, z: torch.Tensor, m_latent: torch.Tensor) -> list[torch.Tensor]:
        """Analysis transform; returns one coded feature map per scale."""
        shapes = self.feature_shapes(z.shape[-2:])
        feats = []
        h = z
        for i, block in enumerate(self.analysis):
            h = block(h, self.m_at(m_latent, shapes[i]))
            if h.shape[-2:] != torch.Size(shapes[i]):
                raise CodecError(f"scale {i}: shape {tuple(h.shape[-2:])} != {shapes[i]}")
            feats.append(self.heads[i](h))
        return feats

    def prior_params(self, i: int, decoded_coarser: list[torch.Tensor],
                     m_latent: torch.Tensor, shape):
        parts = [F.interpolate(f, size=shape, mode="nearest") for f in decoded_coarser]
        parts.append(self.m_at(m_latent, shape))
        return self.priors[i](torch.cat(parts, dim=1))

    def synthesize(self, feats_hat: list[torch.Tensor], m_latent: torch.Tensor,
                   latent_hw) -> torch.Tensor:
        shapes = self.feature_shapes(latent_hw)
        targets = [latent_hw] + shapes[:-1]  # output shape of each synthesis block
        g = self.merges[-1](feats_hat[-1])
        for i in range(self.num_scales - 1, -1, -1):
            g = self.synthesis[i](g, self.m_at(m_latent, targets[i]), targets[i])
            if i > 0:
                g = g + self.merges[i - 1](feats_hat[i - 1])
        return self.out(g)


@dataclass
class CodecModel:
    net: HsvlcNet
    config: dict
    hash8: bytes = b"\x00" * 8

    @property
    def num_scales(self) -> int:
        return self.net.num_scales

    def save(self, path) -> bytes:
        tensors = {k: v.detach().numpy() for k, v in self.net.state_dict().items()}
        self.hash8 = ckpt.save_checkpoint(path, "hsvlc", self.config, tensors)
        return self.hash8

    @classmethod
    def load(cls, path) -> "CodecModel":
        c = ckpt.load_checkpoint(path)
        if c.kind != "hsvlc":
            raise ckpt.CheckpointError(f"expected a codec checkpoint, got {c.kind!r}")
        net = HsvlcNet(num_scales=int(c.config["num_scales"]),
                       hidden=int(c.config["hidden"]),
                       bottleneck=int(c.config["bottleneck"]))
        net.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in c.tensors.items()})
        net.eval()
        return cls(net, c.config, c.hash8)


@dataclass(frozen=True)
class MultiScaleFeatures:
    """Per-scale coded feature maps, channel-last, finest first."""

    features: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(np.asarray(f) for f in self.features))

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]


@dataclass(frozen=True)
class LatentBitstream:
    """Per-scale entropy-coded streams (finest first) with rate accounting."""

    streams: tuple[bytes, ...]
    rates: tuple[int, ...]  # bits, 8 * len(stream)
    model_hash: bytes
    latent_dims: tuple[int, int]
    ideal_bits: tuple[float, ...] | None = None

    def total_bits(self) -> int:
        return sum(self.rates)


def _check_inputs(model: CodecModel, z_hw, M: WeightMap) -> None:
    h, w = M.image_dims
    if (h // 8, w // 8) != tuple(z_hw):
        raise CodecError(f"map for {h}x{w} image does not match latent {tuple(z_hw)}")


def _to_torch(z: np.ndarray) -> torch.Tensor:
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 3 or z.shape[2] != LATENT_CHANNELS:
        raise CodecError(f"expected (h, w, {LATENT_CHANNELS}) latent, got {z.shape}")
    if not np.isfinite(z).all():
        raise CodecError("latent contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(z.transpose(2, 0, 1)))[None]


def _m_latent_t(M: WeightMap, latent_hw) -> torch.Tensor:
    return torch.from_numpy(M.upsample_to(tuple(latent_hw)).astype(np.float32))[None, None]


def gate_masks(M: WeightMap, shapes, num_scales: int) -> list[np.ndarray]:
    """Per-scale boolean keep-masks derived from the importance tiers.

    Scale i (finest = 0) is kept where scales_enabled(m) >= num_scales - i;
    the coarsest scale is always kept.
    """
    latent_hw = (M.image_dims[0] // 8, M.image_dims[1] // 8)
    m_lat = _m_latent_t(M, latent_hw)
    masks = []
    for i, shape in enumerate(shapes):
        m_i = HsvlcNet.m_at(m_lat, shape)[0, 0].numpy().astype(np.float64)
        tiers = scales_enabled(np.clip(m_i, 0.0, 1.0))
        masks.append(tiers >= (num_scales - i))
    return masks


def analyze(model: CodecModel, z0: np.ndarray, M: WeightMap) -> MultiScaleFeatures:
    """Multi-scale analysis of a latent under an importance map."""
    zt = _to_torch(z0)
    _check_inputs(model, zt.shape[-2:], M)
    model.net.eval()
    with torch.no_grad():
        feats = model.net.extract(zt, _m_latent_t(M, zt.shape[-2:]))
    return MultiScaleFeatures(tuple(f[0].numpy().transpose(1, 2, 0) for f in feats))


def gate(features: MultiScaleFeatures, M: WeightMap) -> MultiScaleFeatures:
    """Zero out gated positions (the coded mode, in mean-subtracted coordinates)."""
    shapes = [f.shape[:2] for f in features]
    masks = gate_masks(M, shapes, len(features))
    out = []
    for f, keep in zip(features, masks):
        g = np.array(f, copy=True)
        g[~keep] = 0.0
        out.append(g)
    return MultiScaleFeatures(tuple(out))


def _coding_pass(model: CodecModel, z0: np.ndarray, M: WeightMap,
                 collect_streams: bool):
    """Shared integer encode path; returns decoded features and stream data."""
    zt = _to_torch(z0)
    latent_hw = tuple(zt.shape[-2:])
    _check_inputs(model, latent_hw, M)
    m_lat = _m_latent_t(M, latent_hw)
    model.net.eval()
    with torch.no_grad():
        feats = model.net.extract(zt, m_lat)
    shapes = [tuple(f.shape[-2:]) for f in feats]
    keeps = gate_masks(M, shapes, model.num_scales)

    decoded = []  # coarsest first
    streams = [b""] * model.num_scales
    ideal = [0.0] * model.num_scales
    with torch.no_grad():
        for i in range(model.num_scales - 1, -1, -1):
            mu, sigma = model.net.prior_params(i, decoded, m_lat, shapes[i])
            f = feats[i][0].numpy().astype(np.float64).transpose(1, 2, 0)
            mu_n = mu[0].numpy().astype(np.float64).transpose(1, 2, 0)
            sig_n = sigma[0].numpy().astype(np.float64).transpose(1, 2, 0)
            keep = keeps[i][:, :, None]

            bins = _sigma_bins(sig_n)
            bins[~np.broadcast_to(keep, bins.shape)] = 0  # gated: narrowest bin
            radius = SUPPORT_TABLE[bins]
            residual = np.rint(f - mu_n)
            residual = np.clip(residual, -radius, radius)
            residual[~np.broadcast_to(keep, residual.shape)] = 0.0
            f_hat = residual + mu_n

            symbols = residual.ravel().astype(np.int64)
            bin_flat = bins.ravel()
            dists = [_bin_dist(int(b)) for b in bin_flat]
            ideal[i] = float(sum(-np.log2(d.probability(int(s)))
                                 for s, d in zip(symbols, dists)))
            if collect_streams:
                streams[i] = ec.encode_symbols(symbols, dists)
            decoded.insert(0, torch.from_numpy(
                f_hat.transpose(2, 0, 1)[None].astype(np.float32)))
        z_hat = model.net.synthesize(list(decoded), m_lat, latent_hw)
    return z_hat, decoded, streams, ideal, latent_hw


def compress(model: CodecModel, z0: np.ndarray, M: WeightMap) -> LatentBitstream:
    """Quantize gated features and entropy-code them, coarsest scale first."""
    _, _, streams, ideal, latent_hw = _coding_pass(model, z0, M, collect_streams=True)
    return LatentBitstream(tuple(streams), tuple(8 * len(s) for s in streams),
                           model.hash8, latent_hw, tuple(ideal))


def decode_features(model: CodecModel, bits: LatentBitstream, M: WeightMap,
                    stop_after_scale: int = 0) -> list[np.ndarray | None]:
    """Decode per-scale features, coarsest first, down to ``stop_after_scale``.

    Returns a finest-first list; scales below the stop point are None.
    Decoding scale i touches only stream i and the already-decoded coarser
    scales, so corruption in a finer stream cannot alter coarser scales.
    """
    if bits.model_hash != model.hash8:
        raise CodecError("bitstream was produced by a different codec checkpoint")
    latent_hw = tuple(bits.latent_dims)
    _check_inputs(model, latent_hw, M)
    if len(bits.streams) < model.num_scales:
        raise CodecError(f"expected {model.num_scales} streams, got {len(bits.streams)}")
    m_lat = _m_latent_t(M, latent_hw)
    shapes = model.net.feature_shapes(latent_hw)
    keeps = gate_masks(M, shapes, model.num_scales)

    decoded = []  # coarsest first
    out: list[np.ndarray | None] = [None] * model.num_scales
    model.net.eval()
    with torch.no_grad():
        for i in range(model.num_scales - 1, stop_after_scale - 1, -1):
            mu, sigma = model.net.prior_params(i, decoded, m_lat, shapes[i])
            mu_n = mu[0].numpy().astype(np.float64).transpose(1, 2, 0)
            sig_n = sigma[0].numpy().astype(np.float64).transpose(1, 2, 0)
            keep = keeps[i][:, :, None]
            bins = _sigma_bins(sig_n)
            bins[~np.broadcast_to(keep, bins.shape)] = 0
            dists = [_bin_dist(int(b)) for b in bins.ravel()]
            symbols = np.array(ec.decode_symbols(bits.streams[i], dists), dtype=np.float64)
            f_hat = symbols.reshape(mu_n.shape) + mu_n
            out[i] = f_hat
            decoded.insert(0, torch.from_numpy(
                f_hat.transpose(2, 0, 1)[None].astype(np.float32)))
    return out


def decompress(model: CodecModel, bits: LatentBitstream, M: WeightMap) -> np.ndarray:
    """Reconstruct the latent from a bitstream; deterministic."""
    feats = decode_features(model, bits, M, stop_after_scale=0)
    latent_hw = tuple(bits.latent_dims)
    m_lat = _m_latent_t(M, latent_hw)
    with torch.no_grad():
        feats_t = [torch.from_numpy(f.transpose(2, 0, 1)[None].astype(np.float32))
                   for f in feats]
        z_hat = model.net.synthesize(feats_t, m_lat, latent_hw)
    return z_hat[0].numpy().transpose(1, 2, 0).astype(np.float32)


def _torch_keep_masks(net: HsvlcNet, m_lat: torch.Tensor, shapes) -> list[torch.Tensor]:
    """Boolean keep-masks (B, 1, h_i, w_i); torch mirror of gate_masks."""
    keeps = []
    for idx, shape in enumerate(shapes):
        m_i = F.adaptive_avg_pool2d(m_lat.detach(), shape)
        tier = torch.ones_like(m_i)
        for b in wm.SCALE_BOUNDARIES:
            tier = tier + (m_i >= b).float()
        keeps.append(tier >= (net.num_scales - idx))
    return keeps


def reconstruct_diff(model: CodecModel, z: torch.Tensor,
                     m_lat: torch.Tensor) -> torch.Tensor:
    """Differentiable codec surrogate on torch tensors (B, 4, h, w).

    Identical pipeline to compress+decompress except rounding becomes the
    identity; gated positions still collapse to the predicted mean.
    """
    net = model.net
    feats = net.extract(z, m_lat)
    shapes = [tuple(f.shape[-2:]) for f in feats]
    keeps = _torch_keep_masks(net, m_lat, shapes)
    decoded = []  # coarsest first
    for i in range(net.num_scales - 1, -1, -1):
        mu, _ = net.prior_params(i, decoded, m_lat, shapes[i])
        f_hat = torch.where(keeps[i], feats[i], mu)
        decoded.insert(0, f_hat)
    return net.synthesize(decoded, m_lat, tuple(z.shape[-2:]))


def apply_differentiable(model: CodecModel, z: np.ndarray, M: WeightMap) -> np.ndarray:
    """Numpy wrapper over the differentiable codec surrogate."""
    zt = _to_torch(z)
    _check_inputs(model, zt.shape[-2:], M)
    model.net.eval()
    with torch.no_grad():
        out = reconstruct_diff(model, zt, _m_latent_t(M, zt.shape[-2:]))
    return out[0].numpy().transpose(1, 2, 0).astype(np.float32)


def _likelihood_bits(noisy, mu, sigma):
    upper = torch.special.ndtr((noisy - mu + 0.5) / sigma)
    lower = torch.special.ndtr((noisy - mu - 0.5) / sigma)
    return -torch.log2(torch.clamp(upper - lower, min=1e-12))


def _train_forward(net: HsvlcNet, z: torch.Tensor, m_lat: torch.Tensor,
                   generator: torch.Generator):
    """Noise-quantized forward pass; returns (z_hat, total_bits, batch)."""
    feats = net.extract(z, m_lat)
    shapes = [tuple(f.shape[-2:]) for f in feats]
    keeps = _torch_keep_masks(net, m_lat, shapes)

    total_bits = z.new_zeros(())
    decoded = []  # coarsest first
    for i in range(net.num_scales - 1, -1, -1):
        mu, sigma = net.prior_params(i, decoded, m_lat, shapes[i])
        noise = torch.rand(feats[i].shape, generator=generator) - 0.5
        noisy = feats[i] + noise
        keep = keeps[i].float()
        bits = _likelihood_bits(noisy, mu, sigma) * keep
        total_bits = total_bits + bits.sum()
        f_tilde = torch.where(keeps[i], noisy, mu)
        decoded.insert(0, f_tilde)
    z_hat = net.synthesize(decoded, m_lat, tuple(z.shape[-2:]))
    return z_hat, total_bits


def rd_objective(rate_bits, sq_err_map: np.ndarray, lambda_map: np.ndarray) -> float:
    """Training objective: total bits plus importance-weighted distortion.

    ``sq_err_map`` is the per-cell mean squared reconstruction error at
    latent resolution and ``lambda_map`` the per-cell multiplier.
    """
    sq = np.asarray(sq_err_map, dtype=np.float64)
    lam = np.asarray(lambda_map, dtype=np.float64)
    if sq.shape != lam.shape:
        raise ValueError(f"shape mismatch: {sq.shape} vs {lam.shape}")
    return float(rate_bits) + float((lam * sq).sum())


def rd_loss(model: CodecModel, z0: np.ndarray, M: WeightMap,
            training_noise_seed: int = 0) -> float:
    """Rate-distortion loss of one latent under the noise surrogate."""
    zt = _to_torch(z0)
    _check_inputs(model, zt.shape[-2:], M)
    m_lat = _m_latent_t(M, zt.shape[-2:])
    gen = torch.Generator().manual_seed(training_noise_seed)
    model.net.eval()
    with torch.no_grad():
        z_hat, bits = _train_forward(model.net, zt, m_lat, gen)
    if not (torch.isfinite(z_hat).all() and torch.isfinite(bits)):
        raise CodecError("rate-distortion loss became non-finite")
    sq = ((z_hat - zt) ** 2).mean(dim=1)[0].numpy()
    lam = lambda_of(m_lat[0, 0].numpy().astype(np.float64))
    return rd_objective(float(bits), sq, lam)


@dataclass
class CodecTrainConfig:
    seed: int = 0
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    hidden: int = 64
    bottleneck: int = 32
    num_scales: int = NUM_SCALES
    val_fraction: float = 0.05
    log_every: int = 0


def _sample_maps(rng: np.random.Generator, batch: int, image_dims) -> np.ndarray:
    """Training importance maps: constants and random rectangles."""
    h, w = image_dims
    maps = np.zeros((batch, h // 8, w // 8), dtype=np.float32)
    for b in range(batch):
        u = rng.random()
        if u < 0.25:
            m = WeightMap(np.zeros(wm.grid_shape(image_dims), np.int64), 1, image_dims)
        elif u < 0.5:
            m = WeightMap(np.full(wm.grid_shape(image_dims), 7, np.int64), 8, image_dims)
        else:
            levels = int(rng.integers(2, 9))
            regions = []
            for _ in range(int(rng.integers(1, 3))):
                rw = int(rng.integers(w // 4, w + 1))
                rh = int(rng.integers(h // 4, h + 1))
                x = int(rng.integers(0, w - rw + 1))
                y = int(rng.integers(0, h - rh + 1))
                regions.append(wm.RegionSpec((x, y, rw, rh), float(rng.random())))
            m = wm.build_from_regions(image_dims, regions, levels)
        maps[b] = m.upsample_to((h // 8, w // 8))
    return maps


def train_codec(latents: np.ndarray, config: CodecTrainConfig,
                image_dims: tuple[int, int]) -> CodecModel:
    """Rate-distortion training on latents from a frozen autoencoder."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 4 or latents.shape[0] == 0:
        raise ValueError("need a non-empty (N, h, w, 4) latent stack")
    if config.steps <= 0:
        raise ValueError("steps must be positive")
    if (image_dims[0] // 8, image_dims[1] // 8) != latents.shape[1:3]:
        raise ValueError(f"latent shape {latents.shape[1:3]} != dims {image_dims}/8")

    torch.manual_seed(config.seed)
    net = HsvlcNet(num_scales=config.num_scales, hidden=config.hidden,
                   bottleneck=config.bottleneck)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    z_all = torch.from_numpy(latents.transpose(0, 3, 1, 2))
    cells = float(latents.shape[1] * latents.shape[2])
    losses = []
    for step in range(config.steps):
        idx = rng.integers(0, len(latents), config.batch_size)
        zb = z_all[idx]
        maps = torch.from_numpy(_sample_maps(rng, config.batch_size, image_dims))[:, None]
        z_hat, bits = _train_forward(net, zb, maps, gen)
        lam = 0.01 * torch.exp(7.0 * maps[:, 0])
        sq = ((z_hat - zb) ** 2).mean(dim=1)
        loss = bits / (config.batch_size * cells) + (lam * sq).sum() / (config.batch_size * cells)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(losses[-config.log_every:]))
            print(f"[codec] step {step + 1}/{config.steps} rd {recent:.4f}")

    cfg = {
        "num_scales": config.num_scales, "hidden": config.hidden,
        "bottleneck": config.bottleneck, "seed": config.seed,
        "steps": config.steps, "lr": config.lr,
        "final_loss": round(float(np.mean(losses[-50:])), 6),
    }
    return CodecModel(net.eval(), cfg)
