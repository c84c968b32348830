"""Dual-encoder RGB-D segmentation network with group-gated suppression components.

Wiring (training): RGB and depth encoders produce low-level features; the depth
feature is perturbed (stylization flow or RSM), the perturbation's difference
drives a sensitivity map, the complementary map refines the depth feature,
which is then fused multiplicatively with the RGB feature and decoded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .flow import perturb_rsm, stylize
from .layers import conv2d, upsample_bilinear
from .objectives import LossReport, cross_entropy, soft_alignment_loss, total_loss
from .rng import stream
from .sensitivity import (
    SensitivityBundle,
    channel_sensitivity_gcss,
    class_difference_map,
    csss,
    downsample_labels,
    feature_difference,
    fuse_rgbd,
    gcss_non_sensitivity,
    hard_mask,
    non_sensitivity,
    quantile_alpha,
    refine_depth,
)
from .tensor import Tensor

PARAM_GROUPS = ("rgb_encoder", "depth_encoder", "decoder", "csss_conv")


class ConfigurationError(ValueError):
    pass


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def group(self, group: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == group}

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def to_bytes(self) -> bytes:
        return b"".join(self.tensors[k].data.astype("<f8").tobytes() for k in self.tensors)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def copy(self) -> ModelParams:
        return ModelParams({k: T.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()})


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: ExperimentConfig, seed: int | None = None) -> ModelParams:
    """He-initialized parameters drawn from the ``init`` stream of ``seed``."""
    rng = stream(cfg.seed if seed is None else seed, "init")
    c1, c2 = cfg.rgb_channels
    d1, d2 = cfg.depth_channels
    cd, K = cfg.decoder_channels, cfg.K
    shapes = {
        "rgb_encoder.conv1.weight": (c1, 3, 3, 3),
        "rgb_encoder.conv1.bias": (1, c1, 1, 1),
        "rgb_encoder.conv2.weight": (c2, c1, 3, 3),
        "rgb_encoder.conv2.bias": (1, c2, 1, 1),
        "depth_encoder.conv1.weight": (d1, 1, 3, 3),
        "depth_encoder.conv1.bias": (1, d1, 1, 1),
        "depth_encoder.conv2.weight": (d2, d1, 3, 3),
        "depth_encoder.conv2.bias": (1, d2, 1, 1),
        "depth_encoder.proj.weight": (c2, d2, 1, 1),
        "depth_encoder.proj.bias": (1, c2, 1, 1),
        "decoder.conv1.weight": (cd, c2, 3, 3),
        "decoder.conv1.bias": (1, cd, 1, 1),
        "decoder.conv2.weight": (K, cd, 3, 3),
        "decoder.conv2.bias": (1, K, 1, 1),
    }
    tensors = {}
    for name, shape in shapes.items():
        data = np.zeros(shape) if name.endswith("bias") else _he(rng, shape)
        tensors[name] = T.Tensor(data, requires_grad=True, name=name)
    # identity-like start for the sensitivity gate
    tensors["csss_conv.weight"] = T.scalar(1.0, requires_grad=True, name="csss_conv.weight")
    tensors["csss_conv.bias"] = T.scalar(0.0, requires_grad=True, name="csss_conv.bias")
    return ModelParams(tensors)


@dataclass
class AugmentStreams:
    """Separate generators for lambda, crop position and RSM draws."""

    lam: np.random.Generator
    crop: np.random.Generator
    rsm: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> AugmentStreams:
        return cls(stream(seed, "lambda"), stream(seed, "crop"), stream(seed, "rsm"))

    @classmethod
    def shared(cls, rng: np.random.Generator) -> AugmentStreams:
        return cls(rng, rng, rng)


@dataclass
class ForwardResult:
    logits: Tensor
    loss: Tensor | None
    report: LossReport | None
    bundle: SensitivityBundle | None
    features: dict[str, Tensor]


def encode_rgb(p: ModelParams, x: Tensor) -> Tensor:
    h = T.relu(conv2d(x, p["rgb_encoder.conv1.weight"], p["rgb_encoder.conv1.bias"], stride=2, padding=1))
    return T.relu(conv2d(h, p["rgb_encoder.conv2.weight"], p["rgb_encoder.conv2.bias"], stride=2, padding=1))


def encode_depth(p: ModelParams, x: Tensor) -> Tensor:
    h = T.relu(conv2d(x, p["depth_encoder.conv1.weight"], p["depth_encoder.conv1.bias"], stride=2, padding=1))
    h = T.relu(conv2d(h, p["depth_encoder.conv2.weight"], p["depth_encoder.conv2.bias"], stride=2, padding=1))
    return T.relu(conv2d(h, p["depth_encoder.proj.weight"], p["depth_encoder.proj.bias"]))


def decode(p: ModelParams, z: Tensor, size: tuple[int, int]) -> Tensor:
    h = T.relu(conv2d(z, p["decoder.conv1.weight"], p["decoder.conv1.bias"], padding=1))
    logits = conv2d(h, p["decoder.conv2.weight"], p["decoder.conv2.bias"], padding=1)
    return upsample_bilinear(logits, size)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def uniform_gate(p: ModelParams, shape: tuple[int, ...]) -> Tensor:
    """Evaluation-time S_g: conv and sigmoid applied to a zero sensitivity sum."""
    B, _, H, W = shape
    zero = T.zeros((B, 1, H, W))
    return T.sigmoid(T.conv1x1(zero, p["csss_conv.weight"], p["csss_conv.bias"]))


def forward(
    params: ModelParams,
    rgb,
    depth,
    labels: np.ndarray | None,
    cfg: ExperimentConfig,
    rng: AugmentStreams | np.random.Generator | None = None,
    train: bool = True,
    lam=None,
) -> ForwardResult:
    """Logits plus (in training) the loss report and sensitivity bundle.

    ``lam`` overrides the sampled stylization strength (test hook).
    """
    comp = cfg.components
    x_rgb = _as_tensor(rgb)
    size = x_rgb.shape[2:]
    if isinstance(rng, np.random.Generator):
        rng = AugmentStreams.shared(rng)
    needs_rng = train and comp.perturbation is not None
    if needs_rng and rng is None:
        raise ConfigurationError(f"group {cfg.group} needs an rng to train")
    if train and labels is None:
        raise ConfigurationError("training forward needs labels")

    z_rgb = encode_rgb(params, x_rgb)
    feats = {"z_rgb": z_rgb}
    bundle = None
    styled = None
    if not comp.depth:
        if comp.suppression or comp.perturbation or comp.alignment:
            raise ConfigurationError(f"group {cfg.group} enables components without depth")
        fused = z_rgb
    else:
        if depth is None:
            raise ConfigurationError(f"group {cfg.group} needs depth input")
        z_d = encode_depth(params, _as_tensor(depth))
        feats["z_d"] = z_d
        if comp.suppression is None:
            z_fine = z_d
        elif not train:
            z_fine = _eval_refine(params, z_d, comp.suppression)
        else:
            if comp.perturbation == "imsf":
                out = stylize(z_rgb, z_d, cfg, rng.lam, crop_rng=rng.crop, lam=lam)
                styled = out.styled
                feats["lam"] = T.Tensor(np.asarray(out.lam, dtype=np.float64).reshape(-1, 1, 1, 1)[:, :1])
            elif comp.perturbation == "rsm":
                styled = perturb_rsm(z_d, rng.rsm)
            else:
                raise ConfigurationError(f"group {cfg.group} has suppression without a perturbation")
            feats["z_styled"] = styled
            diff = feature_difference(z_d, styled)
            if cfg.detach_sensitivity:
                diff = diff.detach()
            feats["diff"] = diff
            z_fine, bundle = _train_refine(params, z_d, diff, labels, cfg)
        feats["z_fine"] = z_fine
        fused = fuse_rgbd(z_fine, z_rgb)
    feats["fused"] = fused
    logits = decode(params, fused, size)

    if not train:
        return ForwardResult(logits, None, None, bundle, feats)
    ce = cross_entropy(logits, np.asarray(labels))
    if comp.alignment:
        rgb_side = z_rgb.detach() if cfg.detach_sa_rgb else z_rgb
        sa = soft_alignment_loss(rgb_side, styled, cfg.beta)
    else:
        sa = T.scalar(0.0)
    loss = total_loss(ce, sa)
    beta = cfg.beta if comp.alignment else 0.0
    report = LossReport(ce=ce.item(), sa=sa.item(), total=loss.item(), beta=beta)
    return ForwardResult(logits, loss, report, bundle, feats)


def _train_refine(params: ModelParams, z_d: Tensor, diff: Tensor, labels, cfg: ExperimentConfig):
    kind = cfg.components.suppression
    if kind == "gcss":
        weights = channel_sensitivity_gcss(diff)
        return refine_depth(z_d, gcss_non_sensitivity(weights)), None
    feat_labels = downsample_labels(np.asarray(labels), z_d.shape[2:])
    if kind == "csss":
        bundle = csss(
            diff, feat_labels, cfg.K, params["csss_conv.weight"], params["csss_conv.bias"], cfg.rescale
        )
        return refine_depth(z_d, bundle.non_sensitive), bundle
    if kind == "chss":
        dmap = class_difference_map(diff.data, feat_labels, cfg.K)
        if cfg.alpha_mode == "quantile":
            alpha = quantile_alpha(dmap, feat_labels, cfg.alpha_quantile)
        else:
            alpha = cfg.alpha
        mask = hard_mask(dmap, alpha)
        return refine_depth(z_d, T.Tensor(1.0 - mask.map)), None
    raise ConfigurationError(f"unknown suppression {kind!r}")


def _eval_refine(params: ModelParams, z_d: Tensor, kind: str) -> Tensor:
    # no stylized view at inference: the difference is taken as zero
    if kind == "csss":
        return refine_depth(z_d, non_sensitivity(uniform_gate(params, z_d.shape)))
    if kind == "gcss":
        weights = channel_sensitivity_gcss(T.zeros_like(z_d))
        return refine_depth(z_d, gcss_non_sensitivity(weights))
    if kind == "chss":
        return refine_depth(z_d, T.ones_like(z_d))
    raise ConfigurationError(f"unknown suppression {kind!r}")


def predict(params: ModelParams, rgb, depth, cfg: ExperimentConfig) -> np.ndarray:
    with T.no_grad():
        res = forward(params, rgb, depth, None, cfg, train=False)
    return res.logits.data.argmax(axis=1)
