"""Guided generative decoding.

The decoder inverts the reconstructed latent up the noise schedule with
deterministic DDIM steps, then denoises back down while (a) blending
conditional and unconditional noise predictions with a spatially varying
scale and (b) nudging each step down the gradient of the distance between
the differentiable codec reconstruction and the stored inversion trajectory.
Each outer step runs several self-recurrence iterations that re-inject
Gaussian noise before the final descent.

The guidance displacement per step is capped at the current codec distance;
without the cap, the gradient of the (unsquared) L2 distance has a
magnitude independent of the distance itself, and scaling it by the default
guidance strength of 1000 would throw the state far off the data manifold
at desk scale. The cap preserves the configured behavior for small
strengths and turns large strengths into "move at most all the way".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import bitstream as bs
from .autoencoder import AutoencoderModel, decode_latent
from .checkpoint import combined_hash
from .diffusion import EpsilonModel, NoiseSchedule, cfg_noise
from .hsvlc import CodecModel, LatentBitstream, decompress, reconstruct_diff
from .weight_map import WeightMap, omega_of

ZERO_DISTANCE_GUARD = 1e-8


class DecodeError(ValueError):
    pass


@dataclass
class GuidanceConfig:
    steps: int = 50          # outer sampling steps
    recurrence: int = 8      # self-recurrence iterations per outer step
    gamma_base: float = 1e3  # guidance strength before the schedule factor
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.recurrence < 1 or self.gamma_base < 0:
            raise ValueError(f"invalid guidance config {self}")


@dataclass
class DecoderModels:
    autoencoder: AutoencoderModel
    codec: CodecModel
    epsilon: EpsilonModel

    def container_hash(self) -> bytes:
        return combined_hash(self.autoencoder.hash8, self.codec.hash8)


def gamma_value(gamma_base: float, ab_prev: float, ab_t: float) -> float:
    """Guidance strength at one step: gamma_base * sqrt(ab_prev / ab_t)."""
    return gamma_base * math.sqrt(ab_prev / ab_t)


def sampling_grid(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Uniform-stride subsampling of the training schedule; grid[0] == 0."""
    if not 1 <= steps <= schedule.t_train:
        raise ValueError(f"steps={steps} outside [1, {schedule.t_train}]")
    grid = np.rint(np.arange(steps + 1) * (schedule.t_train / steps)).astype(np.int64)
    if len(np.unique(grid)) != len(grid):
        raise ValueError(f"sampling grid for steps={steps} has repeated indices")
    return grid


def _as_eps_fn(eps, c, omega_map):
    """Accept an EpsilonModel (guided via cfg) or a raw callable(z, t).

    A missing omega map defaults to 1 everywhere, i.e. the plain conditional
    prediction.
    """
    if isinstance(eps, EpsilonModel):
        def fn(z, t):
            omega = np.ones(z.shape[:2]) if omega_map is None else omega_map
            return cfg_noise(eps, z.astype(np.float32), int(t), c, omega)
        return fn
    if callable(eps):
        return eps
    raise TypeError(f"expected EpsilonModel or callable, got {type(eps)!r}")


def _invert_coeffs(ab_t: float, ab_next: float) -> tuple[float, float]:
    a = math.sqrt(ab_next / ab_t)
    b = math.sqrt(ab_next) * (math.sqrt(1.0 / ab_next - 1.0) - math.sqrt(1.0 / ab_t - 1.0))
    return a, b


def ddim_invert(eps, z_hat0: np.ndarray, c, omega_map, config: GuidanceConfig,
                schedule: NoiseSchedule) -> list[np.ndarray]:
    """Deterministic inversion trajectory [z_0 .. z_T] along the sampling grid.

    Each segment evaluates the noise prediction at the segment's upper
    timestep, the same index the denoising step uses, so the two updates are
    exact mutual inverses whenever the prediction does not depend on the
    state itself.
    """
    grid = sampling_grid(schedule, config.steps)
    eps_fn = _as_eps_fn(eps, c, omega_map)
    z = np.asarray(z_hat0, dtype=np.float64)
    traj = [z]
    for k in range(config.steps):
        ab_t = float(schedule.alpha_bar[grid[k]])
        ab_next = float(schedule.alpha_bar[grid[k + 1]])
        a, b = _invert_coeffs(ab_t, ab_next)
        z = a * z + b * np.asarray(eps_fn(z, int(grid[k + 1])), dtype=np.float64)
        traj.append(z)
    return traj


def _codec_distance_grad(codec: CodecModel, z_t: np.ndarray, z_target: np.ndarray,
                         M: WeightMap) -> tuple[np.ndarray, float]:
    """(gradient of ||C_diff(z) - target||_2 w.r.t. z, distance)."""
    dtype = next(codec.net.parameters()).dtype
    leaf = torch.from_numpy(
        np.ascontiguousarray(np.asarray(z_t, np.float64).transpose(2, 0, 1))[None])
    leaf = leaf.to(torch.float64).requires_grad_(True)
    m_lat = torch.from_numpy(
        M.upsample_to(tuple(leaf.shape[-2:])).astype(np.float64))[None, None].to(dtype)
    target = torch.from_numpy(
        np.asarray(z_target, np.float64).transpose(2, 0, 1))[None]
    out = reconstruct_diff(codec, leaf.to(dtype), m_lat).to(torch.float64)
    dist = torch.linalg.vector_norm(out - target)
    if float(dist.detach()) < ZERO_DISTANCE_GUARD:
        return np.zeros_like(np.asarray(z_t, np.float64)), float(dist.detach())
    dist.backward()
    grad = leaf.grad[0].numpy().transpose(1, 2, 0)
    return grad, float(dist.detach())


def guidance_gradient(codec: CodecModel, z_t: np.ndarray, z_target: np.ndarray,
                      M: WeightMap) -> np.ndarray:
    """Gradient of the codec-to-target L2 distance; zero below the guard."""
    grad, _ = _codec_distance_grad(codec, z_t, z_target, M)
    return grad


def denoise_step(eps, z_t: np.ndarray, k: int, c, omega_map, z_target,
                 config: GuidanceConfig, schedule: NoiseSchedule,
                 codec: CodecModel | None = None,
                 M: WeightMap | None = None) -> np.ndarray:
    """One deterministic step from grid index k to k-1, with optional guidance.

    The guidance term moves the state down the codec-distance gradient
    (attraction toward the inversion trajectory); its displacement is capped
    at the current distance.
    """
    grid = sampling_grid(schedule, config.steps)
    if not 1 <= k <= config.steps:
        raise ValueError(f"denoise step k={k} outside [1, {config.steps}]")
    ab_t = float(schedule.alpha_bar[grid[k]])
    ab_prev = float(schedule.alpha_bar[grid[k - 1]])
    a = math.sqrt(ab_prev / ab_t)
    b = math.sqrt(ab_prev) * (math.sqrt(1.0 / ab_prev - 1.0) - math.sqrt(1.0 / ab_t - 1.0))
    eps_fn = _as_eps_fn(eps, c, omega_map)
    z = np.asarray(z_t, dtype=np.float64)
    out = a * z + b * np.asarray(eps_fn(z, int(grid[k])), dtype=np.float64)
    if config.gamma_base > 0 and z_target is not None:
        if codec is None or M is None:
            raise ValueError("guidance requires a codec model and a weight map")
        grad, dist = _codec_distance_grad(codec, z, z_target, M)
        gamma = gamma_value(config.gamma_base, ab_prev, ab_t)
        step = gamma * grad
        norm = float(np.linalg.norm(step))
        if norm > dist > 0.0:
            step *= dist / norm
        out = out - step
    return out


def self_recur(schedule: NoiseSchedule, z_prev: np.ndarray, t: int, t_prev: int,
               rng: np.random.Generator) -> np.ndarray:
    """Re-noise from level t_prev back up to level t (training-schedule indices)."""
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    if ab_t > ab_prev:
        raise ValueError(f"self-recurrence requires t >= t_prev, got {t} < {t_prev}")
    ratio = ab_t / ab_prev
    noise = rng.standard_normal(np.asarray(z_prev).shape)
    return math.sqrt(ratio) * np.asarray(z_prev, np.float64) + math.sqrt(1.0 - ratio) * noise


def decode_latent_guided(z_hat0: np.ndarray | None, M: WeightMap, caption: str,
                         models: DecoderModels, config: GuidanceConfig) -> np.ndarray:
    """Run the full guided reverse process; returns the final clean latent.

    With ``z_hat0`` None (no latent payload), decoding falls back to pure
    conditional generation from seeded noise, without codec guidance.
    """
    eps_model = models.epsilon
    schedule = eps_model.schedule()
    grid = sampling_grid(schedule, config.steps)
    latent_hw = (M.image_dims[0] // 8, M.image_dims[1] // 8)
    omega_map = omega_of(M.upsample_to(latent_hw))
    c = eps_model.embed_caption(caption)
    rng = np.random.default_rng(config.seed)

    if z_hat0 is not None:
        traj = ddim_invert(eps_model, z_hat0, c, omega_map, config, schedule)
        z = traj[config.steps]
    else:
        traj = None
        z = rng.standard_normal((*latent_hw, 4))

    for k in range(config.steps, 0, -1):
        target = traj[k] if traj is not None else None
        for r in range(config.recurrence):
            z_prev = denoise_step(eps_model, z, k, c, omega_map, target, config,
                                  schedule, models.codec, M)
            if r + 1 < config.recurrence:
                z = self_recur(schedule, z_prev, int(grid[k]), int(grid[k - 1]), rng)
        z = z_prev
    return z.astype(np.float32)


def decode(container: bs.RsicContainer, models: DecoderModels,
           config: GuidanceConfig) -> np.ndarray:
    """Decode a parsed container to an image; pure function of its inputs."""
    if container.model_hash != models.container_hash():
        raise DecodeError(
            "container was produced with different model checkpoints "
            f"(hash {container.model_hash.hex()} != {models.container_hash().hex()})")
    M = container.weight_map()
    latent_hw = (container.image_dims[0] // 8, container.image_dims[1] // 8)
    if any(container.latent_streams):
        bits = LatentBitstream(container.latent_streams[:models.codec.num_scales],
                               tuple(8 * len(s) for s in
                                     container.latent_streams[:models.codec.num_scales]),
                               models.codec.hash8, latent_hw)
        z_hat0 = decompress(models.codec, bits, M).astype(np.float64)
    else:
        z_hat0 = None
    z0 = decode_latent_guided(z_hat0, M, container.description, models, config)
    return decode_latent(models.autoencoder, z0)
