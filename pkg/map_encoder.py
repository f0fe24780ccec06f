"""
Map Encoder
===========

Turns a binary drivable-area mask into the map token sequence `phi_map`:
coordinate/distance channel augmentation, a three-layer conv stack, one global
token plus overlapping local patch tokens, learned token positions and a
vision-transformer encoder.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from config import ModelConfig
from errors import ContractError, DimensionError
from nn_blocks import init_te_block, te_block
from tensor import (ParamScope, Tensor, add, concat, conv2d, extract_patches, linear, normal_table,
                    relu, reshape, uniform_fan_in)

logger = logging.getLogger(__name__)

# (out_channels, kernel, stride) of the three conv layers
CONV_LAYERS: Tuple[Tuple[int, int, int], ...] = ((8, 3, 1), (16, 3, 2), (6, 1, 1))
INPUT_CHANNELS = 4


@dataclass
class DrivableMask:
    """Square {0,1} raster in scene-frame metres.

    Pixel (r, c) covers x in [origin_x + c*res, origin_x + (c+1)*res) and
    y in [origin_y + r*res, origin_y + (r+1)*res).
    """
    grid: np.ndarray
    resolution: float
    origin: Tuple[float, float]

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise DimensionError(f"drivable mask must be square, got shape {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise ContractError("drivable mask must contain only 0 and 1")
        if not grid.any():
            raise ContractError("drivable mask has no drivable pixel")
        if self.resolution <= 0:
            raise ContractError(f"mask resolution must be positive, got {self.resolution}")
        self.grid = grid.astype(np.uint8)
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def size(self) -> int:
        return self.grid.shape[0]

    @classmethod
    def centered(cls, grid: np.ndarray, extent: float) -> "DrivableMask":
        size = np.asarray(grid).shape[0]
        return cls(grid=grid, resolution=extent / size, origin=(-extent / 2.0, -extent / 2.0))

    def pixel_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Scene-frame x and y of every pixel center, each [size, size]."""
        idx = (np.arange(self.size) + 0.5) * self.resolution
        x = self.origin[0] + idx[None, :].repeat(self.size, axis=0)
        y = self.origin[1] + idx[:, None].repeat(self.size, axis=1)
        return x, y

    def pixel_of(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=float)
        col = np.floor((points[..., 0] - self.origin[0]) / self.resolution).astype(int)
        row = np.floor((points[..., 1] - self.origin[1]) / self.resolution).astype(int)
        return row, col

    def contains(self, points: np.ndarray) -> np.ndarray:
        """True where a point falls on a drivable pixel inside the raster."""
        row, col = self.pixel_of(points)
        inside = (row >= 0) & (row < self.size) & (col >= 0) & (col < self.size)
        result = np.zeros(row.shape, dtype=bool)
        result[inside] = self.grid[row[inside], col[inside]] == 1
        return result

    def drivable_fraction(self) -> float:
        return float(self.grid.mean())

    def to_rows(self) -> List[str]:
        return ["".join("1" if v else "0" for v in row) for row in self.grid]

    @classmethod
    def from_rows(cls, rows: List[str], resolution: float, origin: Tuple[float, float]) -> "DrivableMask":
        if any(len(r) != len(rows) for r in rows):
            raise DimensionError("mask rows must all have length equal to the row count")
        if any(set(r) - {"0", "1"} for r in rows):
            raise ContractError("mask rows may only contain '0' and '1'")
        grid = np.array([[ch == "1" for ch in r] for r in rows], dtype=np.uint8)
        return cls(grid=grid, resolution=resolution, origin=origin)


@dataclass
class MapTokens:
    """`phi_map`: token 0 is the global embedding, then the local patch tokens."""
    phi_map: Tensor
    n_patches: int

    @property
    def n_tokens(self) -> int:
        return self.phi_map.shape[0]


def augment_channels(mask: DrivableMask, raw_indices: bool = False) -> Tensor:
    """Stack (mask, row index, col index, distance to center) into [4, S, S].

    Indices are divided by S-1 unless `raw_indices`; the distance from pixel
    (r, c) to the center pixel position ((S-1)/2, (S-1)/2) is divided by the
    half-diagonal, so the corners read exactly 1.
    """
    s = mask.size
    rows, cols = np.meshgrid(np.arange(s, dtype=float), np.arange(s, dtype=float), indexing="ij")
    center = (s - 1) / 2.0
    distance = np.hypot(rows - center, cols - center) / (center * np.sqrt(2.0))
    if not raw_indices:
        rows, cols = rows / (s - 1), cols / (s - 1)
    return Tensor(np.stack([mask.grid.astype(float), rows, cols, distance]))


def init_map_encoder(scope: ParamScope, cfg: ModelConfig, rng: np.random.Generator) -> None:
    in_channels = INPUT_CHANNELS
    for i, (out_channels, kernel, _) in enumerate(CONV_LAYERS):
        fan_in = in_channels * kernel * kernel
        scope.add(f"conv{i}.kernel", uniform_fan_in(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        scope.add(f"conv{i}.bias", np.zeros(out_channels))
        in_channels = out_channels
    side = cfg.map_size // 2
    flat = in_channels * side * side
    scope.add("global.w", uniform_fan_in(rng, (flat, cfg.d_m), flat))
    scope.add("global.b", np.zeros(cfg.d_m))
    if cfg.map_mode == "transformer":
        patch_flat = in_channels * cfg.patch_size * cfg.patch_size
        scope.add("patch.w", uniform_fan_in(rng, (patch_flat, cfg.d_m), patch_flat))
        scope.add("patch.b", np.zeros(cfg.d_m))
        scope.add("pos", normal_table(rng, (1 + cfg.patch_count, cfg.d_m)))
        block = cfg.block_config()
        for i in range(cfg.map_blocks):
            init_te_block(scope.scope(f"vit{i}"), block, rng)


def conv_stack(x: Tensor, params: ParamScope, cfg: ModelConfig) -> Tensor:
    """Three convolutions (8/16/6 filters, 3x3/3x3/1x1, strides 1/2/1), ReLU after the first two."""
    expected = (INPUT_CHANNELS, cfg.map_size, cfg.map_size)
    if x.shape != expected:
        raise DimensionError(f"conv stack expects input {expected}, got {x.shape}")
    out = x
    for i, (channels, _, stride) in enumerate(CONV_LAYERS):
        out = conv2d(out, params[f"conv{i}.kernel"], stride=stride, padding="same")
        out = add(out, reshape(params[f"conv{i}.bias"], (channels, 1, 1)))
        if i < len(CONV_LAYERS) - 1:
            out = relu(out)
    return out


def patch_embed(fmap: Tensor, params: ParamScope, cfg: ModelConfig) -> Tensor:
    """Global token followed by the patch tokens, before position embedding; the global token alone in `cnn` mode."""
    side = cfg.map_size // 2
    expected = (CONV_LAYERS[-1][0], side, side)
    if fmap.shape != expected:
        raise DimensionError(f"tokenizer expects feature map {expected}, got {fmap.shape}")
    global_token = linear(reshape(fmap, (1, fmap.size)), params["global.w"], params["global.b"])
    if cfg.map_mode == "cnn":
        return global_token
    local = linear(extract_patches(fmap, cfg.patch_size, cfg.patch_stride), params["patch.w"], params["patch.b"])
    return concat([global_token, local], axis=0)


def tokenize(fmap: Tensor, params: ParamScope, cfg: ModelConfig) -> MapTokens:
    tokens = patch_embed(fmap, params, cfg)
    if cfg.map_mode == "cnn":
        return MapTokens(phi_map=tokens, n_patches=0)
    tokens = add(tokens, params["pos"])
    block = cfg.block_config()
    for i in range(cfg.map_blocks):
        tokens = te_block(tokens, params.scope(f"vit{i}"), block)
    return MapTokens(phi_map=tokens, n_patches=cfg.patch_count)


def encode_map(mask: DrivableMask, params: ParamScope, cfg: ModelConfig) -> Optional[MapTokens]:
    """Full map path; None when the model runs without map input."""
    if cfg.map_mode == "none":
        return None
    if mask.size != cfg.map_size:
        raise DimensionError(f"mask is {mask.size}px but the model expects {cfg.map_size}px")
    fmap = conv_stack(augment_channels(mask, cfg.raw_pixel_indices), params, cfg)
    return tokenize(fmap, params, cfg)


def patch_coverage(side: int, size: int, stride: int) -> np.ndarray:
    """How many patches cover each feature-map cell."""
    counts = np.zeros((side, side), dtype=int)
    n = (side - size) // stride + 1
    for i in range(n):
        for j in range(n):
            counts[i * stride:i * stride + size, j * stride:j * stride + size] += 1
    return counts
