"""Analytic-vs-central-difference gradient checks for the DSSS forward pass.

All randomness (lambda, crop window, RSM draws) is sampled once and frozen so
the checked function is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .flow import apply_flow, compute_flow
from .model import AugmentStreams, forward, init_params
from .objectives import soft_alignment_loss
from .sensitivity import csss, feature_difference, fuse_rgbd, refine_depth
from .stats import draw_region
from .tensor import Tensor

TOLERANCE = 1e-5
FD_EPS = 1e-6


@dataclass
class CheckLine:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


@dataclass
class CompositeCase:
    """Frozen inputs for one composite check."""

    z_rgb: np.ndarray
    z_d: np.ndarray
    labels: np.ndarray
    probe: np.ndarray
    weight: float
    bias: float
    lam: np.ndarray
    region: object
    K: int


def make_case(seed: int, shape=(1, 4, 4, 4), K: int = 3, crop: int = 2) -> CompositeCase:
    rng = np.random.default_rng(seed)
    B, C, H, W = shape
    z_rgb = rng.normal(0.5, 1.0, size=shape)
    z_d = rng.normal(0.0, 0.7, size=shape)
    labels = rng.integers(0, K, size=(B, H, W)).astype(np.int64)
    labels[rng.random((B, H, W)) < 0.1] = 255
    return CompositeCase(
        z_rgb=z_rgb,
        z_d=z_d,
        labels=labels,
        probe=rng.normal(size=shape),
        weight=float(rng.uniform(0.5, 2.0)),
        bias=float(rng.uniform(-1.0, 1.0)),
        lam=rng.uniform(0.2, 1.0, size=B),
        region=draw_region(H, W, crop, rng),
        K=K,
    )


def dsss_objective(case: CompositeCase, z_rgb: Tensor, z_d: Tensor, weight: Tensor, bias: Tensor, beta: float = 0.1) -> Tensor:
    """Flow, restyle, difference, class-wise sensitivity, refine, fuse, plus alignment."""
    flow = compute_flow(z_rgb, z_d, case.region.size, region=case.region)
    styled = apply_flow(z_d, flow, case.lam)
    diff = feature_difference(z_d, styled)
    bundle = csss(diff, case.labels, case.K, weight, bias, rescale=True)
    fused = fuse_rgbd(refine_depth(z_d, bundle.non_sensitive), z_rgb)
    task = T.sum(T.mul(fused, Tensor(case.probe)))
    return T.add(task, soft_alignment_loss(z_rgb, styled, beta))


def check_composite(seed: int) -> list[CheckLine]:
    """Gradient of the composite with respect to both features and the conv pair."""
    case = make_case(seed)
    leaves = {
        "z_rgb": Tensor(case.z_rgb, requires_grad=True),
        "z_d": Tensor(case.z_d, requires_grad=True),
        "csss_conv.weight": T.scalar(case.weight, requires_grad=True),
        "csss_conv.bias": T.scalar(case.bias, requires_grad=True),
    }
    grads = T.backward(dsss_objective(case, *leaves.values()))
    lines = []
    for name, leaf in leaves.items():

        def f(x, name=name):
            args = {k: (x if k == name else v.detach()) for k, v in leaves.items()}
            return dsss_objective(case, *args.values())

        numeric = T.finite_diff_grad(f, leaf, FD_EPS)
        lines.append(CheckLine(name, T.relative_error(grads[leaf], numeric.data)))
    return lines


def gradcheck_config() -> ExperimentConfig:
    """Narrow network so finite differences over every parameter stay cheap."""
    return ExperimentConfig(
        group="G",
        K=3,
        crop_size=2,
        rgb_channels=(4, 6),
        depth_channels=(2, 4),
        decoder_channels=6,
        iterations=0,
    )


def _model_inputs(seed: int, size: int, K: int):
    rng = np.random.default_rng(seed + 7919)
    rgb = rng.random((1, 3, size, size))
    depth = rng.random((1, 1, size, size))
    labels = rng.integers(0, K, size=(1, size, size)).astype(np.int64)
    return rgb, depth, labels


def check_model(seed: int, size: int = 8, per_tensor: int = 16, inject_fault: bool = False) -> list[CheckLine]:
    """Full Group G loss vs finite differences, one line per parameter group.

    A random subset of ``per_tensor`` coordinates is probed in each tensor.
    ``inject_fault`` perturbs the analytic decoder gradient (self-test hook).
    """
    cfg = gradcheck_config().replace(seed=seed)
    params = init_params(cfg, seed)
    rgb, depth, labels = _model_inputs(seed, size, cfg.K)
    aug_seed = seed + 104729

    def loss_value() -> float:
        with T.no_grad():
            res = forward(params, rgb, depth, labels, cfg, AugmentStreams.from_seed(aug_seed))
        return res.loss.item()

    res = forward(params, rgb, depth, labels, cfg, AugmentStreams.from_seed(aug_seed))
    grads = T.backward(res.loss)
    pick = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name, p in params.tensors.items():
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1).copy()
        group = name.split(".", 1)[0]
        if inject_fault and group == "decoder":
            analytic *= 1.01
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(per_tensor, flat.size), replace=False)
        numeric = np.zeros(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + FD_EPS
            hi = loss_value()
            flat[i] = orig - FD_EPS
            lo = loss_value()
            flat[i] = orig
            numeric[j] = (hi - lo) / (2 * FD_EPS)
        err = T.relative_error(analytic[idx], numeric)
        worst[group] = max(worst.get(group, 0.0), err)
    return [CheckLine(g, e) for g, e in worst.items()]
