import math

import numpy as np
import pytest

from dsss import tensor as T
from dsss.sensitivity import (
    IGNORE,
    channel_sensitivity_gcss,
    class_difference_map,
    class_partition,
    class_spatial_sensitivity,
    csss,
    downsample_labels,
    feature_difference,
    fuse_rgbd,
    gcss_non_sensitivity,
    global_sensitivity,
    hard_mask,
    non_sensitivity,
    quantile_alpha,
    quantize_map,
    refine_depth,
    write_sensitivity_maps,
)
from dsss.tensor import Tensor


def _random_case(seed, shape=(2, 3, 5, 5), K=4, ignore=0.15):
    rng = np.random.default_rng(seed)
    diff = Tensor(np.abs(rng.normal(size=shape)))
    labels = rng.integers(0, K, size=(shape[0],) + shape[2:])
    labels[rng.random(labels.shape) < ignore] = IGNORE
    return diff, labels


def test_feature_difference_examples():
    a = Tensor(np.random.default_rng(0).normal(size=(1, 2, 2, 2)))
    assert np.all(feature_difference(a, a).data == 0.0)
    assert feature_difference(T.scalar(1.0), T.scalar(3.0)).item() == 2.0
    b = Tensor(np.random.default_rng(1).normal(size=(1, 2, 2, 2)))
    np.testing.assert_array_equal(feature_difference(a, b).data, feature_difference(b, a).data)


def test_downsample_labels_examples():
    lab = np.random.default_rng(0).integers(0, 3, size=(1, 4, 4))
    np.testing.assert_array_equal(downsample_labels(lab, (4, 4)), lab)
    assert np.all(downsample_labels(np.full((1, 4, 4), 2), (2, 2)) == 2)
    checker = (np.indices((4, 4)).sum(axis=0) % 2)[None]
    np.testing.assert_array_equal(downsample_labels(checker, (2, 2)), checker[:, ::2, ::2])


def test_partition_single_class_and_all_ignore():
    diff, _ = _random_case(1, K=3)
    zeros = np.zeros((2, 5, 5), dtype=int)
    parts = class_partition(diff, zeros, 3)
    np.testing.assert_array_equal(parts[0].data, diff.data)
    assert all(np.all(p.data == 0) for p in parts[1:])
    parts = class_partition(diff, np.full((2, 5, 5), IGNORE), 3)
    assert all(np.all(p.data == 0) for p in parts)


def test_partition_reconstructs_diff_exactly():
    for seed in range(100):
        diff, labels = _random_case(seed)
        parts = class_partition(diff, labels, 4)
        residue = diff.data * (labels == IGNORE)[:, None]
        total = residue + sum(p.data for p in parts)
        np.testing.assert_array_equal(total, diff.data)


def test_partition_rejects_bad_labels():
    diff, labels = _random_case(2, K=3)
    labels[0, 0, 0] = 7
    with pytest.raises(T.ValidationError):
        class_partition(diff, labels, 3)


def test_class_sensitivity_examples():
    mask = np.zeros((1, 1, 3, 3), dtype=bool)
    mask[0, 0, :2, :2] = True
    uniform = class_spatial_sensitivity(Tensor(np.full((1, 3, 3, 3), 0.4)), mask).data
    np.testing.assert_allclose(uniform[mask], 0.25, atol=1e-15)
    assert np.all(uniform[~mask] == 0.0)
    assert np.all(class_spatial_sensitivity(Tensor(np.ones((1, 2, 3, 3))), np.zeros_like(mask)).data == 0)

    x = np.random.default_rng(3).normal(size=(1, 2, 3, 3))
    out = class_spatial_sensitivity(Tensor(x), mask).data
    p = T.softmax_spatial(Tensor(x[:, :1]), mask).data
    q = T.softmax_spatial(Tensor(x[:, 1:]), mask).data
    np.testing.assert_allclose(out, (p + q) / 2, atol=1e-15)


def test_global_sensitivity_examples():
    zero = [Tensor(np.zeros((1, 1, 2, 2))) for _ in range(3)]
    np.testing.assert_allclose(global_sensitivity(zero, T.scalar(1.0), T.scalar(0.0)).data, 0.5)
    one = [T.scalar(1.0)]
    assert global_sensitivity(one, T.scalar(2.0), T.scalar(-1.0)).item() == pytest.approx(0.731059, abs=1e-6)
    lo = global_sensitivity([T.scalar(0.2)], T.scalar(1.5), T.scalar(0.3)).item()
    hi = global_sensitivity([T.scalar(0.6)], T.scalar(1.5), T.scalar(0.3)).item()
    assert hi >= lo


def test_non_sensitivity_examples():
    assert non_sensitivity(T.scalar(0.7)).item() == pytest.approx(0.3)
    np.testing.assert_array_equal(non_sensitivity(Tensor(np.full((1, 1, 2, 2), 0.5))).data, 0.5)


def test_refine_and_fuse_examples():
    z = Tensor(np.random.default_rng(4).normal(size=(1, 2, 2, 2)))
    np.testing.assert_array_equal(refine_depth(z, Tensor(np.zeros((1, 1, 2, 2)))).data, z.data)
    np.testing.assert_array_equal(refine_depth(z, Tensor(np.ones((1, 1, 2, 2)))).data, 2 * z.data)
    assert refine_depth(T.scalar(4.0), T.scalar(0.25)).item() == 5.0
    r = Tensor(np.random.default_rng(5).normal(size=(1, 2, 2, 2)))
    np.testing.assert_array_equal(fuse_rgbd(T.zeros_like(r), r).data, r.data)
    assert np.all(fuse_rgbd(z, T.zeros_like(r)).data == 0.0)
    assert fuse_rgbd(T.scalar(1.0), T.scalar(3.0)).item() == 6.0


def test_algebraic_forms_match_two_step():
    rng = np.random.default_rng(6)
    z, r, n = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4)), rng.random((2, 1, 4, 4))
    fine = refine_depth(Tensor(z), Tensor(n)).data
    np.testing.assert_allclose(fine, z * n + z, atol=1e-15)
    np.testing.assert_allclose(fine, z * (1 + n), atol=1e-14)
    np.testing.assert_allclose(fuse_rgbd(Tensor(fine), Tensor(r)).data, r * (1 + fine), atol=1e-14)


def test_csss_normalization_and_range():
    for seed in range(100):
        diff, labels = _random_case(seed)
        b = csss(diff, labels, 4, T.scalar(1.0), T.scalar(0.0))
        for k, s in enumerate(b.per_class):
            sums = s.data.sum(axis=(1, 2, 3))
            present = (labels == k).any(axis=(1, 2))
            np.testing.assert_allclose(sums[present], 1.0, atol=1e-9)
            assert np.all(sums[~present] == 0.0)
            assert np.all(s.data >= 0)
        assert np.all((b.global_map.data > 0) & (b.global_map.data < 1))
        assert np.all(b.global_map.data + b.non_sensitive.data == 1.0)
        np.testing.assert_array_equal(b.non_sensitive.data, 1.0 - b.global_map.data)


def test_csss_identity_chain_is_uniform():
    # zero difference: each present class gets a uniform 1/n_k softmax, so the
    # summed map is piecewise constant; with rescale off and weight 0 it collapses
    z = Tensor(np.random.default_rng(7).normal(size=(1, 3, 4, 4)))
    diff = feature_difference(z, z)
    labels = np.zeros((1, 4, 4), dtype=int)
    b = csss(diff, labels, 3, T.scalar(1.0), T.scalar(0.4))
    n = b.non_sensitive.data
    assert np.max(np.abs(n - n.ravel()[0])) < 1e-12
    b0 = csss(diff, np.random.default_rng(8).integers(0, 3, size=(1, 4, 4)), 3, T.scalar(0.0), T.scalar(0.4))
    np.testing.assert_allclose(b0.global_map.data, 1 / (1 + math.exp(-0.4)), atol=1e-12)
    out = refine_depth(z, b0.non_sensitive).data / z.data
    assert np.max(np.abs(out - out.ravel()[0])) < 1e-12


def test_csss_rescale_factor():
    diff, labels = _random_case(9, K=3)
    off = csss(diff, labels, 3, T.scalar(1.0), T.scalar(0.0), rescale=False)
    on = csss(diff, labels, 3, T.scalar(1.0), T.scalar(0.0), rescale=True)
    total = sum(s.data for s in off.per_class)
    np.testing.assert_allclose(on.global_map.data, 1 / (1 + np.exp(-total * 25 / 3)), atol=1e-14)


def test_csss_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    z_d = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    z_rgb = Tensor(rng.normal(size=(1, 3, 4, 4)), requires_grad=True)
    noise = rng.normal(size=(1, 3, 4, 4))
    labels = rng.integers(0, 3, size=(1, 4, 4))
    w, b = T.scalar(1.2, requires_grad=True), T.scalar(-0.3, requires_grad=True)

    def f(zd, zr, ww, bb):
        styled = T.add(T.mul(zd, 1.3), Tensor(noise))
        bundle = csss(feature_difference(zd, styled), labels, 3, ww, bb)
        return T.sum(fuse_rgbd(refine_depth(zd, bundle.non_sensitive), zr))

    grads = T.backward(f(z_d, z_rgb, w, b))
    leaves = [z_d, z_rgb, w, b]
    for i, leaf in enumerate(leaves):
        def g(x, i=i):
            args = [x if j == i else v.detach() for j, v in enumerate(leaves)]
            return f(*args)

        assert T.relative_error(grads[leaf], T.finite_diff_grad(g, leaf).data) < 1e-5


def test_hard_mask_threshold_examples():
    assert hard_mask(np.full((1, 1, 1, 1), 25.0), 20).map.item() == 1.0
    assert hard_mask(np.full((1, 1, 1, 1), 10.0), 20).map.item() == 0.0
    assert hard_mask(np.full((1, 1, 1, 1), 20.0), 20).map.item() == 0.0


def test_hard_mask_boundary_on_random_maps():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        m = rng.random((2, 1, 4, 4))
        alpha = m[:, 0, 0, 0].copy()  # values exactly equal to alpha must be 0
        mask = hard_mask(m, alpha).map
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert np.all(mask[:, 0, 0, 0] == 0.0)
        np.testing.assert_array_equal(mask, (m > alpha[:, None, None, None]).astype(float))


def test_quantile_alpha_masks_top_fraction():
    rng = np.random.default_rng(11)
    dmap = rng.random((3, 1, 8, 8))
    labels = np.zeros((3, 8, 8), dtype=int)
    alpha = quantile_alpha(dmap, labels, 0.9)
    frac = hard_mask(dmap, alpha).map.mean(axis=(1, 2, 3))
    assert np.all(np.abs(frac - 0.1) < 0.03)


def test_class_difference_map_zero_on_ignore():
    diff, labels = _random_case(12)
    dmap = class_difference_map(diff.data, labels, 4)
    assert dmap.shape == (2, 1, 5, 5)
    assert np.all(dmap[:, 0][labels == IGNORE] == 0)
    np.testing.assert_allclose(dmap[:, 0][labels != IGNORE], diff.data.mean(axis=1)[labels != IGNORE])


def test_gcss_examples():
    w = channel_sensitivity_gcss(Tensor(np.random.default_rng(13).random((2, 1, 3, 3))))
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_array_equal(gcss_non_sensitivity(w).data, 1.0)
    np.testing.assert_allclose(channel_sensitivity_gcss(Tensor(np.full((1, 4, 2, 2), 0.3))).data, 0.25)
    d = np.zeros((1, 2, 2, 2))
    d[0, 1] = math.log(3)
    np.testing.assert_allclose(channel_sensitivity_gcss(Tensor(d)).data.ravel(), [0.25, 0.75], atol=1e-12)
    n = gcss_non_sensitivity(channel_sensitivity_gcss(Tensor(np.random.default_rng(14).random((2, 5, 3, 3)))))
    np.testing.assert_allclose(n.data.mean(axis=1), 1.0, atol=1e-12)


def test_write_sensitivity_maps(tmp_path):
    s = Tensor(np.random.default_rng(15).random((2, 1, 3, 4)))
    paths = write_sensitivity_maps(s, tmp_path, "s_g")
    from dsss import netpbm

    assert [p.name for p in paths] == ["s_g_0.pgm", "s_g_1.pgm"]
    np.testing.assert_array_equal(netpbm.read_pgm(paths[1]), quantize_map(s.data[1, 0]))
    with pytest.raises(OSError, match="sensitivity map"):
        write_sensitivity_maps(s, tmp_path / "missing", "x")
