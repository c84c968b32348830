import numpy as np
import pytest

from dsss import tensor as T
from dsss.config import ExperimentConfig
from dsss.layers import bilinear_matrix, conv2d, upsample_bilinear
from dsss.model import (
    PARAM_GROUPS,
    AugmentStreams,
    ConfigurationError,
    decode,
    encode_depth,
    encode_rgb,
    forward,
    init_params,
    predict,
)
from dsss.objectives import soft_alignment_loss
from dsss.sensitivity import fuse_rgbd
from dsss.tensor import Tensor

SMALL = dict(K=3, crop_size=4, rgb_channels=(4, 6), depth_channels=(2, 4), decoder_channels=5)


def _batch(seed=0, size=16, B=2, K=3):
    rng = np.random.default_rng(seed)
    return rng.random((B, 3, size, size)), rng.random((B, 1, size, size)), rng.integers(0, K, size=(B, size, size))


def _cfg(group, **kw):
    return ExperimentConfig(group=group, **{**SMALL, **kw})


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(1, 4, 1, 1))
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,ochw->bo", patch, w) + b[0, :, 0, 0]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_and_upsample_gradients():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    probe = Tensor(rng.normal(size=(1, 3, 8, 8)))

    def f(xx, ww):
        return T.sum(T.mul(upsample_bilinear(conv2d(xx, ww, None, stride=2, padding=1), (8, 8)), probe))

    grads = T.backward(f(x, w))
    assert T.relative_error(grads[x], T.finite_diff_grad(lambda t: f(t, w.detach()), x).data) < 1e-6
    assert T.relative_error(grads[w], T.finite_diff_grad(lambda t: f(x.detach(), t), w).data) < 1e-6


def test_bilinear_rows_sum_to_one():
    for n_out, n_in in ((16, 4), (5, 5), (3, 7)):
        np.testing.assert_allclose(bilinear_matrix(n_out, n_in).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(bilinear_matrix(4, 4), np.eye(4), atol=1e-12)


def test_param_groups_and_init():
    cfg = _cfg("G")
    p = init_params(cfg, 0)
    groups = {n.split(".", 1)[0] for n in p.names()}
    assert groups == set(PARAM_GROUPS)
    assert p["csss_conv.weight"].item() == 1.0 and p["csss_conv.bias"].item() == 0.0
    assert p.count() > 0 and np.isfinite(p.count())
    assert init_params(cfg, 0).digest() == p.digest() != init_params(cfg, 1).digest()


def test_group_a_has_no_alignment_or_bundle():
    cfg = _cfg("A")
    rgb, depth, labels = _batch()
    res = forward(init_params(cfg, 0), rgb, None, labels, cfg)
    assert res.report.sa == 0.0 and res.bundle is None
    assert res.logits.shape == (2, 3, 16, 16)


def test_group_b_matches_hand_wired_composition():
    cfg = _cfg("B")
    p = init_params(cfg, 0)
    rgb, depth, labels = _batch(1)
    res = forward(p, rgb, depth, labels, cfg)
    hand = decode(p, fuse_rgbd(encode_depth(p, Tensor(depth)), encode_rgb(p, Tensor(rgb))), (16, 16))
    np.testing.assert_array_equal(res.logits.data, hand.data)


def test_lambda_zero_chain_matches_group_f():
    rgb, depth, labels = _batch(2)
    cfg_g, cfg_f = _cfg("G"), _cfg("F")
    p = init_params(cfg_g, 0)
    g = forward(p, rgb, depth, labels, cfg_g, AugmentStreams.from_seed(5), lam=0.0)
    f = forward(p, rgb, depth, labels, cfg_f, AugmentStreams.from_seed(5), lam=0.0)
    # eps-limited reconstruction leaves a tiny residual difference
    assert np.max(g.features["diff"].data) < 1e-3
    np.testing.assert_allclose(g.logits.data, f.logits.data, atol=1e-4)
    # with lambda = 0 the alignment term compares RGB to (reconstructed) depth features
    expect = soft_alignment_loss(g.features["z_rgb"], g.features["z_styled"], 0.1).item()
    assert g.report.sa == pytest.approx(expect)
    assert g.report.total == pytest.approx(g.report.ce + g.report.sa)


@pytest.mark.parametrize("group", ["A", "B"])
def test_gated_components_get_zero_gradient(group):
    cfg = _cfg(group)
    p = init_params(cfg, 0)
    rgb, depth, labels = _batch(3)
    grads = T.backward(forward(p, rgb, depth, labels, cfg, AugmentStreams.from_seed(0)).loss)
    for name in ("csss_conv.weight", "csss_conv.bias"):
        assert np.all(grads.get(p[name], np.zeros(1)) == 0.0)
    if group == "A":
        assert all(p[n] not in grads for n in p.group("depth_encoder"))


@pytest.mark.parametrize("group", ["C", "D", "E", "F", "G"])
def test_every_group_trains_a_step(group):
    cfg = _cfg(group)
    p = init_params(cfg, 0)
    rgb, depth, labels = _batch(4)
    res = forward(p, rgb, depth, labels, cfg, AugmentStreams.from_seed(1))
    grads = T.backward(res.loss)
    assert np.isfinite(res.report.total)
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    assert (res.bundle is not None) == (cfg.components.suppression == "csss")
    if group in ("D", "F", "G"):
        assert np.any(grads[p["csss_conv.weight"]] != 0.0)


def test_forward_is_deterministic_given_streams():
    cfg = _cfg("G")
    p = init_params(cfg, 0)
    rgb, depth, labels = _batch(5)
    a = forward(p, rgb, depth, labels, cfg, AugmentStreams.from_seed(3)).logits.data
    b = forward(p, rgb, depth, labels, cfg, AugmentStreams.from_seed(3)).logits.data
    np.testing.assert_array_equal(a, b)


def test_eval_uses_uniform_gate_and_is_pure():
    cfg = _cfg("G")
    p = init_params(cfg, 0)
    p["csss_conv.bias"].data[:] = 0.7
    rgb, depth, _ = _batch(6)
    eval_res = forward(p, rgb, depth, None, cfg, train=False)
    n = 1 - 1 / (1 + np.exp(-0.7))
    z_d = eval_res.features["z_d"].data
    np.testing.assert_allclose(eval_res.features["z_fine"].data, z_d * (1 + n), atol=1e-14)
    pred = predict(p, rgb, depth, cfg)
    np.testing.assert_array_equal(pred, eval_res.logits.data.argmax(axis=1))


def test_configuration_errors():
    rgb, depth, labels = _batch(7)
    cfg = _cfg("G")
    p = init_params(cfg, 0)
    with pytest.raises(ConfigurationError):
        forward(p, rgb, depth, labels, cfg, None)
    with pytest.raises(ConfigurationError):
        forward(p, rgb, None, labels, _cfg("B"))
    with pytest.raises(ConfigurationError):
        forward(p, rgb, depth, None, _cfg("A"))
