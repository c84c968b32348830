"""Class-wise soft spatial sensitivity suppression and its ablation variants.

Sensitivity is the per-position change a depth feature undergoes under a
perturbation. The soft variant turns it into a (0,1) map whose complement
amplifies the stable (domain-invariant) depth positions before RGB-D fusion.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import netpbm
from . import tensor as T
from .tensor import Tensor

IGNORE = 255


@dataclass(frozen=True)
class SensitivityBundle:
    per_class: list[Tensor]  # K maps [B,1,H,W]
    global_map: Tensor  # S_g, (0,1)
    non_sensitive: Tensor  # 1 - S_g


@dataclass(frozen=True)
class HardMask:
    map: np.ndarray  # [B,1,H,W] of {0.0, 1.0}
    alpha: np.ndarray  # threshold per batch item


def feature_difference(z_d: Tensor, z_styled: Tensor) -> Tensor:
    if z_d.shape != z_styled.shape:
        raise T.ShapeError(f"difference of mismatched shapes {z_d.shape} and {z_styled.shape}")
    return T.absolute(T.sub(z_d, z_styled))


def downsample_labels(labels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour label resampling; each target cell takes its top-left source."""
    labels = np.asarray(labels)
    H, W = labels.shape[-2:]
    th, tw = target
    if th > H or tw > W:
        raise T.ShapeError(f"cannot downsample {H}x{W} labels to {th}x{tw}")
    rows = (np.arange(th) * H) // th
    cols = (np.arange(tw) * W) // tw
    return labels[..., rows[:, None], cols[None, :]]


def check_labels(labels: np.ndarray, K: int) -> np.ndarray:
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= K))
    if bad.any():
        raise T.ValidationError(f"label ids must be < K={K} or {IGNORE}, found {labels[bad][0]}")
    return labels


def class_masks(labels: np.ndarray, K: int) -> list[np.ndarray]:
    """Boolean ``[B,1,H,W]`` mask per class; IGNORE pixels belong to none."""
    labels = check_labels(labels, K)[:, None]
    return [labels == k for k in range(K)]


def class_partition(diff: Tensor, labels: np.ndarray, K: int) -> list[Tensor]:
    B, _, H, W = diff.shape
    if np.asarray(labels).shape != (B, H, W):
        raise T.ShapeError(f"labels {np.asarray(labels).shape} do not match features {(B, H, W)}")
    return [T.mul(diff, Tensor(m.astype(np.float64))) for m in class_masks(labels, K)]


def class_spatial_sensitivity(z_k: Tensor, class_mask: np.ndarray) -> Tensor:
    """Masked spatial softmax per channel, averaged over channels -> ``[B,1,H,W]``."""
    return T.mean(T.softmax_spatial(z_k, class_mask), axes=1)


def global_sensitivity(per_class: list[Tensor], weight: Tensor, bias: Tensor, rescale: float = 1.0) -> Tensor:
    total = per_class[0]
    for s in per_class[1:]:
        total = T.add(total, s)
    if rescale != 1.0:
        total = T.scale(total, rescale)
    return T.sigmoid(T.conv1x1(total, weight, bias))


def non_sensitivity(s_g: Tensor) -> Tensor:
    return T.sub(1.0, s_g)


def refine_depth(z_d: Tensor, n_g) -> Tensor:
    """``z_d * N + z_d``; ``N`` broadcasts over channels (or spatially, for GCSS weights)."""
    n = n_g if isinstance(n_g, Tensor) else Tensor(np.asarray(n_g, dtype=np.float64))
    return T.add(T.mul(z_d, n), z_d)


def fuse_rgbd(z_fine: Tensor, z_rgb: Tensor) -> Tensor:
    if z_fine.shape != z_rgb.shape:
        raise T.ShapeError(f"fusion of mismatched shapes {z_fine.shape} and {z_rgb.shape}")
    return T.add(T.mul(z_fine, z_rgb), z_rgb)


def csss(
    diff: Tensor,
    labels: np.ndarray,
    K: int,
    weight: Tensor,
    bias: Tensor,
    rescale: bool = True,
) -> SensitivityBundle:
    """Full class-wise soft spatial sensitivity: partition, masked softmax, conv, sigmoid."""
    _, _, H, W = diff.shape
    masks = class_masks(labels, K)
    parts = class_partition(diff, labels, K)
    per_class = [class_spatial_sensitivity(z_k, m) for z_k, m in zip(parts, masks)]
    s_g = global_sensitivity(per_class, weight, bias, (H * W) / K if rescale else 1.0)
    return SensitivityBundle(per_class=per_class, global_map=s_g, non_sensitive=non_sensitivity(s_g))


# ---------------------------------------------------------------------------
# hard (thresholded) spatial sensitivity


def class_difference_map(diff: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    """Channel-mean difference on labelled pixels, zero on IGNORE -> ``[B,1,H,W]``."""
    labels = check_labels(labels, K)
    valid = (labels != IGNORE)[:, None]
    return np.where(valid, np.asarray(diff).mean(axis=1, keepdims=True), 0.0)


def hard_mask(diff_map: np.ndarray, alpha) -> HardMask:
    """1 where the difference strictly exceeds ``alpha`` (scalar or per item), else 0."""
    diff_map = np.asarray(diff_map, dtype=np.float64)
    B = diff_map.shape[0]
    a = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (B,)).copy()
    if not np.all(np.isfinite(a)):
        raise T.ValidationError("alpha must be finite")
    m = (diff_map > a.reshape(B, 1, 1, 1)).astype(np.float64)
    return HardMask(map=m, alpha=a)


def quantile_alpha(diff_map: np.ndarray, labels: np.ndarray, q: float) -> np.ndarray:
    """Per-item threshold at the ``q``-quantile of the labelled difference values."""
    labels = np.asarray(labels)
    out = np.zeros(diff_map.shape[0])
    for b in range(diff_map.shape[0]):
        vals = diff_map[b, 0][labels[b] != IGNORE]
        out[b] = np.quantile(vals, q) if vals.size else 0.0
    return out


# ---------------------------------------------------------------------------
# global channel soft sensitivity


def channel_sensitivity_gcss(diff: Tensor) -> Tensor:
    """Softmax over channels of each channel's spatial-mean difference -> ``[B,C,1,1]``."""
    return T.softmax_channels(T.mean(diff, axes=(2, 3)))


def gcss_non_sensitivity(weights: Tensor) -> Tensor:
    """``1 - softmax`` rescaled to mean 1 over channels; constant 1 for a single channel."""
    C = weights.shape[1]
    if C == 1:
        return T.ones_like(weights)
    return T.scale(T.sub(1.0, weights), C / (C - 1.0))


# ---------------------------------------------------------------------------
# export


def quantize_map(m: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(255.0 * np.asarray(m)), 0, 255).astype(np.uint8)


def write_sensitivity_maps(s_map: Tensor | np.ndarray, directory: str | Path, prefix: str) -> list[Path]:
    """One 8-bit P5 graymap per batch item with values ``round(255 * S)``."""
    data = s_map.data if isinstance(s_map, Tensor) else np.asarray(s_map)
    directory = Path(directory)
    paths = []
    for b in range(data.shape[0]):
        path = directory / f"{prefix}_{b}.pgm"
        try:
            netpbm.write_pgm(path, quantize_map(data[b, 0]))
        except OSError as exc:
            raise OSError(f"cannot write sensitivity map {path}: {exc}") from exc
        paths.append(path)
    return paths
