"""Per-channel feature statistics, instance normalization and random cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-5


@dataclass(frozen=True)
class ChannelStats:
    """Spatial mean and std per (batch, channel), both shaped ``[B,C,1,1]``."""

    mean: Tensor
    std: Tensor


@dataclass(frozen=True)
class CropRegion:
    top: int
    left: int
    size: int


def channel_stats(t: Tensor, eps: float = EPS) -> ChannelStats:
    """Mean and ``sqrt(population variance + eps)`` over H·W."""
    if t.shape[2] * t.shape[3] < 1:
        raise T.ShapeError("channel_stats needs at least one spatial position")
    if eps < 0:
        raise T.ValidationError("eps must be non-negative")
    mu = T.mean(t, axes=(2, 3))
    centered = T.sub(t, mu)
    var = T.mean(T.square(centered), axes=(2, 3))
    return ChannelStats(mean=mu, std=T.sqrt(T.add(var, eps)))


def instance_normalize(t: Tensor, eps: float = EPS) -> Tensor:
    if eps <= 0:
        raise T.ValidationError("instance_normalize needs eps > 0")
    stats = channel_stats(t, eps)
    return T.div(T.sub(t, stats.mean), stats.std)


def draw_region(height: int, width: int, size: int, rng: np.random.Generator) -> CropRegion:
    """Uniform square window of side ``min(size, height, width)``."""
    if size < 1:
        raise T.ValidationError("crop size must be >= 1")
    side = min(size, height, width)
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return CropRegion(top, left, side)


def apply_crop(t: Tensor, region: CropRegion) -> Tensor:
    _, _, H, W = t.shape
    if region.top + region.size > H or region.left + region.size > W:
        raise T.ShapeError(f"{region} does not fit a {H}x{W} map")
    return T.crop(t, region.top, region.left, region.size, region.size)


def random_crop(t: Tensor, size: int, rng: np.random.Generator) -> tuple[Tensor, CropRegion]:
    region = draw_region(t.shape[2], t.shape[3], size, rng)
    return apply_crop(t, region), region
