"""Spatial importance maps.

A weight map is a coarse grid (one cell per 64x64 pixel block) of quantized
importance values in [0, 1]. It steers bit allocation in the latent codec,
the rate-distortion trade-off during training, and the balance between
caption conditioning and local guidance during decoding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BLOCK = 64  # image pixels covered by one map cell, per side
MAX_LEVELS = 8

# Importance thresholds that switch on progressively finer coding scales.
# A boundary value activates the finer tier.
SCALE_BOUNDARIES = (0.5, 0.75, 0.875)


@dataclass(frozen=True)
class RegionSpec:
    """Axis-aligned pixel rectangle with an importance weight in [0, 1]."""

    rect: tuple[int, int, int, int]  # (x, y, w, h)
    weight: float

    def validate(self, dims: tuple[int, int]) -> None:
        h_img, w_img = dims
        x, y, w, h = self.rect
        if w <= 0 or h <= 0:
            raise ValueError(f"region {self.rect} has non-positive size")
        if x < 0 or y < 0 or x + w > w_img or y + h > h_img:
            raise ValueError(f"region {self.rect} out of bounds for {w_img}x{h_img} image")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"region weight {self.weight} outside [0, 1]")


@dataclass(frozen=True)
class WeightMap:
    """Quantized importance grid at 1/64 of image resolution.

    ``grid`` holds level indices in [0, levels-1]; the real value of a cell
    is ``level / (levels - 1)`` (0 when levels == 1). Treat instances as
    immutable; they are shared freely across encode/decode jobs.
    """

    grid: np.ndarray
    levels: int
    image_dims: tuple[int, int]  # (H, W) in pixels

    def __post_init__(self):
        if not 1 <= self.levels <= MAX_LEVELS:
            raise ValueError(f"levels must be in [1, {MAX_LEVELS}], got {self.levels}")
        h, w = self.image_dims
        if h <= 0 or w <= 0:
            raise ValueError(f"invalid image dims {self.image_dims}")
        rows, cols = grid_shape(self.image_dims)
        grid = np.asarray(self.grid, dtype=np.int64)
        if grid.shape != (rows, cols):
            raise ValueError(f"grid shape {grid.shape} != expected {(rows, cols)}")
        if grid.min(initial=0) < 0 or grid.max(initial=0) > self.levels - 1:
            raise ValueError("grid entries outside [0, levels-1]")
        object.__setattr__(self, "grid", grid)
        self.grid.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def values(self) -> np.ndarray:
        """Grid of real cell values in [0, 1]."""
        if self.levels == 1:
            return np.zeros(self.grid.shape, dtype=np.float64)
        return self.grid.astype(np.float64) / (self.levels - 1)

    def value_at(self, grid_pos: tuple[int, int]) -> float:
        r, c = grid_pos
        rows, cols = self.grid.shape
        if not (0 <= r < rows and 0 <= c < cols):
            raise IndexError(f"grid position {grid_pos} outside {rows}x{cols}")
        if self.levels == 1:
            return 0.0
        return float(self.grid[r, c]) / (self.levels - 1)

    def bpp(self) -> float:
        """Bits per image pixel consumed by the packed map."""
        rows, cols = self.grid.shape
        h, w = self.image_dims
        return rows * cols * bits_per_cell(self.levels) / (h * w)

    def upsample_to(self, target_dims: tuple[int, int]) -> np.ndarray:
        """Nearest-neighbor replication of cell values to ``target_dims``."""
        th, tw = target_dims
        if th <= 0 or tw <= 0:
            raise ValueError(f"invalid target dims {target_dims}")
        rows, cols = self.grid.shape
        if th % rows != 0 or tw % cols != 0:
            raise ValueError(f"target {target_dims} is not a multiple of grid {rows}x{cols}")
        return np.kron(self.values(), np.ones((th // rows, tw // cols), dtype=np.float64))

    def pack(self) -> bytes:
        """Fixed-width bit packing, row-major, MSB first, zero-padded to a byte."""
        nbits = bits_per_cell(self.levels)
        if nbits == 0:
            return b""
        out = bytearray()
        acc = 0
        filled = 0
        for level in self.grid.ravel():
            acc = (acc << nbits) | int(level)
            filled += nbits
            while filled >= 8:
                filled -= 8
                out.append((acc >> filled) & 0xFF)
        if filled:
            out.append((acc << (8 - filled)) & 0xFF)
        return bytes(out)


def grid_shape(image_dims: tuple[int, int]) -> tuple[int, int]:
    h, w = image_dims
    return math.ceil(h / BLOCK), math.ceil(w / BLOCK)


def bits_per_cell(levels: int) -> int:
    if not 1 <= levels <= MAX_LEVELS:
        raise ValueError(f"levels must be in [1, {MAX_LEVELS}], got {levels}")
    return math.ceil(math.log2(levels)) if levels > 1 else 0


def packed_size(image_dims: tuple[int, int], levels: int) -> int:
    rows, cols = grid_shape(image_dims)
    return (rows * cols * bits_per_cell(levels) + 7) // 8


def quantize(values: np.ndarray, levels: int) -> np.ndarray:
    """Round real values in [0, 1] to uniform level indices."""
    if not 1 <= levels <= MAX_LEVELS:
        raise ValueError(f"levels must be in [1, {MAX_LEVELS}], got {levels}")
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < -1e-9 or values.max() > 1 + 1e-9):
        raise ValueError("values outside [0, 1]")
    if levels == 1:
        return np.zeros(values.shape, dtype=np.int64)
    return np.clip(np.rint(values * (levels - 1)), 0, levels - 1).astype(np.int64)


def build_from_regions(dims: tuple[int, int], regions: list[RegionSpec],
                       levels: int) -> WeightMap:
    """Rasterize rectangles onto the 1/64-scale grid.

    A cell takes the maximum weight among regions covering at least half of
    its (in-image) area, 0 otherwise, then quantizes to ``levels`` uniform
    levels by rounding.
    """
    if not 1 <= levels <= MAX_LEVELS:
        raise ValueError(f"levels must be in [1, {MAX_LEVELS}], got {levels}")
    h, w = dims
    rows, cols = grid_shape(dims)
    values = np.zeros((rows, cols), dtype=np.float64)
    for region in regions:
        region.validate(dims)
        x, y, rw, rh = region.rect
        for r in range(rows):
            cell_y0, cell_y1 = r * BLOCK, min((r + 1) * BLOCK, h)
            oy = max(0, min(cell_y1, y + rh) - max(cell_y0, y))
            if oy == 0:
                continue
            for c in range(cols):
                cell_x0, cell_x1 = c * BLOCK, min((c + 1) * BLOCK, w)
                ox = max(0, min(cell_x1, x + rw) - max(cell_x0, x))
                cell_area = (cell_y1 - cell_y0) * (cell_x1 - cell_x0)
                if 2 * ox * oy >= cell_area:
                    values[r, c] = max(values[r, c], region.weight)
    return WeightMap(quantize(values, levels), levels, dims)


def build_from_mask(dims: tuple[int, int], mask: np.ndarray, levels: int) -> WeightMap:
    """Resample a full-resolution grayscale mask in [0, 1] by block averaging."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != dims:
        raise ValueError(f"mask shape {mask.shape} != image dims {dims}")
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise ValueError("mask values outside [0, 1]")
    h, w = dims
    rows, cols = grid_shape(dims)
    values = np.zeros((rows, cols), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            block = mask[r * BLOCK:min((r + 1) * BLOCK, h), c * BLOCK:min((c + 1) * BLOCK, w)]
            values[r, c] = block.mean()
    return WeightMap(quantize(values, levels), levels, dims)


def unpack(data: bytes, dims: tuple[int, int], levels: int) -> WeightMap:
    """Inverse of :meth:`WeightMap.pack`."""
    rows, cols = grid_shape(dims)
    nbits = bits_per_cell(levels)
    if nbits == 0:
        if data:
            raise ValueError("levels=1 map must pack to zero bytes")
        return WeightMap(np.zeros((rows, cols), dtype=np.int64), levels, dims)
    needed = (rows * cols * nbits + 7) // 8
    if len(data) != needed:
        raise ValueError(f"packed map is {len(data)} bytes, expected {needed}")
    grid = np.zeros(rows * cols, dtype=np.int64)
    acc = 0
    avail = 0
    pos = 0
    for i in range(rows * cols):
        while avail < nbits:
            acc = (acc << 8) | data[pos]
            pos += 1
            avail += 8
        avail -= nbits
        grid[i] = (acc >> avail) & ((1 << nbits) - 1)
    grid = grid.reshape(rows, cols)
    if grid.max(initial=0) > levels - 1:
        raise ValueError("packed map contains level indices outside [0, levels-1]")
    return WeightMap(grid, levels, dims)


def _check_unit(m: float) -> float:
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"importance value {m} outside [0, 1]")
    return float(m)


def lambda_of(m):
    """Rate-distortion multiplier for importance ``m``: 0.01 * exp(7 m)."""
    if isinstance(m, np.ndarray):
        if m.size and (m.min() < 0 or m.max() > 1):
            raise ValueError("importance values outside [0, 1]")
        return 0.01 * np.exp(7.0 * m)
    return 0.01 * math.exp(7.0 * _check_unit(m))


def omega_of(m):
    """Caption-guidance scale for importance ``m``: 3 * (1 - 0.7 m), in [0.9, 3]."""
    if isinstance(m, np.ndarray):
        if m.size and (m.min() < 0 or m.max() > 1):
            raise ValueError("importance values outside [0, 1]")
        return 3.0 * (1.0 - 0.7 * m)
    return 3.0 * (1.0 - 0.7 * _check_unit(m))


def scales_enabled(m) -> int:
    """Number of coding scales active at importance ``m``, from coarsest up.

    1 below 1/2, then one more scale at each of the 1/2, 3/4 and 7/8
    boundaries; a boundary value activates the finer tier.
    """
    if isinstance(m, np.ndarray):
        if m.size and (m.min() < 0 or m.max() > 1):
            raise ValueError("importance values outside [0, 1]")
        out = np.ones(m.shape, dtype=np.int64)
        for b in SCALE_BOUNDARIES:
            out += (m >= b).astype(np.int64)
        return out
    m = _check_unit(m)
    return 1 + sum(m >= b for b in SCALE_BOUNDARIES)
