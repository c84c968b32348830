"""Training losses and the mIoU evaluation metric."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import IO

import numpy as np

from . import tensor as T
from .sensitivity import IGNORE
from .tensor import Tensor


@dataclass(frozen=True)
class LossReport:
    ce: float
    sa: float
    total: float
    beta: float


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the non-IGNORE pixels."""
    x = logits.data
    B, K, H, W = x.shape
    labels = np.asarray(labels)
    if labels.shape != (B, H, W):
        raise T.ShapeError(f"labels {labels.shape} do not match logits {(B, H, W)}")
    if K < 2:
        raise T.ValidationError("cross_entropy needs K >= 2")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        raise T.ValidationError("every pixel is IGNORE; cross entropy is undefined")
    if np.any(labels[valid] >= K) or np.any(labels[valid] < 0):
        raise T.ValidationError(f"label ids must be < K={K}")
    shifted = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    target = np.where(valid, labels, 0)[:, None]
    picked = np.take_along_axis(logp, target, axis=1)[:, 0]
    loss = -(picked * valid).sum() / n

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target, np.take_along_axis(grad, target, axis=1) - 1.0, axis=1)
        grad *= valid[:, None] / n
        return (grad * g.reshape(()),)

    return T.from_op(np.full((1, 1, 1, 1), loss), (logits,), vjp)


def soft_alignment_loss(z_rgb: Tensor, z_styled: Tensor, beta: float = 0.1) -> Tensor:
    """``beta`` times the mean squared difference over all B·C·H·W elements."""
    if z_rgb.shape != z_styled.shape:
        raise T.ShapeError(f"alignment of mismatched shapes {z_rgb.shape} and {z_styled.shape}")
    if beta < 0:
        raise T.ValidationError("beta must be >= 0")
    return T.scale(T.mean(T.square(T.sub(z_rgb, z_styled))), beta)


def total_loss(ce: Tensor, sa: Tensor) -> Tensor:
    return T.add(ce, sa)


class ConfusionMatrix:
    """``counts[truth, pred]`` over scored (non-IGNORE) pixels."""

    def __init__(self, K: int):
        if K < 1:
            raise T.ValidationError("K must be >= 1")
        self.K = K
        self.counts = np.zeros((K, K), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape:
            raise T.ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
        keep = truth != IGNORE
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if t.size and (t.max() >= self.K or t.min() < 0 or p.max() >= self.K or p.min() < 0):
            raise T.ValidationError(f"class ids must lie in [0, {self.K})")
        self.counts += np.bincount(t * self.K + p, minlength=self.K * self.K).reshape(self.K, self.K)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.K != self.K:
            raise T.ShapeError("cannot merge confusion matrices of different K")
        out = ConfusionMatrix(self.K)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_update(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    return cm.update(pred, truth)


def miou(cm: ConfusionMatrix) -> tuple[float, list[float | None]]:
    """Mean IoU over classes seen in truth or prediction; absent classes map to ``None``."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    present = denom > 0
    if not present.any():
        raise T.ValidationError("no class occurs in truth or prediction")
    per_class = [float(tp[k] / denom[k]) if present[k] else None for k in range(cm.K)]
    return float(np.mean(tp[present] / denom[present])), per_class


def write_record(stream: IO[str], record: dict) -> None:
    """Append one JSON line; NaN/inf floats become ``null``."""

    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, np.generic):
            return clean(v.item())
        return v

    stream.write(json.dumps({k: clean(v) for k, v in record.items()}, sort_keys=True) + "\n")


def metric_record(step: int, domain: str, cm: ConfusionMatrix) -> dict:
    mean, per_class = miou(cm)
    return {"step": step, "domain": domain, "miou": mean, "per_class": per_class}
