"""RGB-D inter-modal stylization flow and the random-style (RSM) perturbation baseline.

The flow shifts the per-channel statistics of a depth feature toward those of a
random crop of the RGB feature; ``lambda`` picks how far along that shift to go.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .stats import EPS, CropRegion, apply_crop, channel_stats, draw_region
from .tensor import Tensor


@dataclass(frozen=True)
class Flow:
    d_mu: Tensor  # [B,C,1,1]
    d_sigma: Tensor  # [B,C,1,1]
    region: CropRegion


@dataclass(frozen=True)
class StylizationOutput:
    styled: Tensor
    lam: np.ndarray
    flow: Flow


def compute_flow(
    z_rgb: Tensor,
    z_d: Tensor,
    crop_size: int,
    rng: np.random.Generator | None = None,
    eps: float = EPS,
    region: CropRegion | None = None,
) -> Flow:
    """Statistic displacement from ``z_d`` toward a random crop of ``z_rgb``.

    Pass ``region`` to reuse a fixed crop instead of drawing one from ``rng``.
    """
    if z_rgb.shape[:2] != z_d.shape[:2]:
        raise T.ShapeError(f"batch/channel mismatch: {z_rgb.shape[:2]} vs {z_d.shape[:2]}")
    if region is None:
        if rng is None:
            raise T.ValidationError("compute_flow needs an rng or a fixed region")
        region = draw_region(z_rgb.shape[2], z_rgb.shape[3], crop_size, rng)
    rgb_stats = channel_stats(apply_crop(z_rgb, region), eps)
    d_stats = channel_stats(z_d, eps)
    return Flow(
        d_mu=T.sub(rgb_stats.mean, d_stats.mean),
        d_sigma=T.sub(rgb_stats.std, d_stats.std),
        region=region,
    )


def _lambda_tensor(lam, batch: int, channels: int) -> Tensor:
    arr = np.asarray(lam, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise T.ValidationError("lambda must lie in [0, 1]")
    if arr.ndim == 0:
        return T.scalar(float(arr))
    if arr.shape == (batch,):
        return Tensor(arr.reshape(batch, 1, 1, 1))
    if arr.shape == (batch, channels):
        return Tensor(arr.reshape(batch, channels, 1, 1))
    raise T.ShapeError(f"lambda shape {arr.shape} fits neither [B] nor [B,C]")


def apply_flow(z_d: Tensor, flow: Flow, lam, eps: float = EPS) -> Tensor:
    """Restyle ``z_d`` to statistics ``mu + lam*d_mu`` and ``max(sigma + lam*d_sigma, eps)``.

    ``lam`` is a scalar, one value per batch item, or one per (item, channel).
    """
    B, C = z_d.shape[:2]
    lam_t = _lambda_tensor(lam, B, C)
    stats = channel_stats(z_d, eps)
    target_mu = T.add(stats.mean, T.mul(lam_t, flow.d_mu))
    target_sigma = T.maximum(T.add(stats.std, T.mul(lam_t, flow.d_sigma)), eps)
    normalized = T.div(T.sub(z_d, stats.mean), stats.std)
    return T.add(T.mul(target_sigma, normalized), target_mu)


def sample_lambda(mode: str, batch: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    if mode == "batch":
        return np.full(batch, rng.uniform(0.0, 1.0))
    if mode == "channel":
        return rng.uniform(0.0, 1.0, size=(batch, channels))
    return rng.uniform(0.0, 1.0, size=batch)


def stylize(
    z_rgb: Tensor,
    z_d: Tensor,
    cfg: ExperimentConfig,
    rng: np.random.Generator,
    crop_rng: np.random.Generator | None = None,
    lam=None,
) -> StylizationOutput:
    """Sample lambda (and a crop), then restyle ``z_d`` along the flow.

    ``lam`` overrides the sampled value. With ``cfg.detach_flow`` the flow
    statistics are treated as constants.
    """
    B, C = z_d.shape[:2]
    if lam is None:
        lam = sample_lambda(cfg.lambda_mode, B, C, rng)
    src_rgb, src_d = (z_rgb.detach(), z_d.detach()) if cfg.detach_flow else (z_rgb, z_d)
    flow = compute_flow(src_rgb, src_d, cfg.crop_size, crop_rng if crop_rng is not None else rng, cfg.eps)
    styled = apply_flow(z_d, flow, lam, cfg.eps)
    return StylizationOutput(styled=styled, lam=np.asarray(lam, dtype=np.float64), flow=flow)


def blur_matrix(n: int, sigma: float) -> np.ndarray:
    """3-tap Gaussian as an ``n x n`` matrix with half-sample reflective padding.

    Edge-inclusive reflection makes every column sum to one, so blurring
    conserves total mass as well as constants.
    """
    side = np.exp(-1.0 / (2.0 * sigma * sigma)) if sigma > 0 else 0.0
    taps = np.array([side, 1.0, side])
    taps /= taps.sum()
    m = np.zeros((n, n))
    for i in range(n):
        for off, w in zip((-1, 0, 1), taps):
            j = i + off
            if j < 0:
                j = -j - 1
            elif j >= n:
                j = 2 * n - j - 1
            m[i, j] += w
    return m


def perturb_rsm(
    z_d: Tensor,
    rng: np.random.Generator,
    sigma_range: tuple[float, float] = (0.5, 1.5),
    gain_range: tuple[float, float] = (0.8, 1.2),
    offset_range: tuple[float, float] = (-0.1, 0.1),
) -> Tensor:
    """Random blur followed by a per-channel affine intensity jitter.

    Offsets are expressed in units of each channel's (constant, detached) std.
    """
    B, C, H, W = z_d.shape
    sigma = rng.uniform(*sigma_range)
    gain = rng.uniform(*gain_range, size=(B, C, 1, 1))
    offset = rng.uniform(*offset_range, size=(B, C, 1, 1))
    std = z_d.data.std(axis=(2, 3), keepdims=True)
    blurred = T.spatial_linear(z_d, blur_matrix(H, sigma), blur_matrix(W, sigma))
    return T.add(T.mul(blurred, Tensor(gain)), Tensor(offset * std))
