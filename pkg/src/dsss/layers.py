"""Convolution and resampling layers for the miniature encoders and decoder."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Tensor


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution via im2col. ``weight`` is ``[Cout, Cin, k, k]``."""
    xd, wd = x.data, weight.data
    B, Ci, H, W = xd.shape
    Co, Ci_w, k, k2 = wd.shape
    if Ci != Ci_w or k != k2:
        raise T.ShapeError(f"conv weight {wd.shape} does not fit input {xd.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    Hp, Wp = xp.shape[2:]
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Ci * k * k)
    wmat = wd.reshape(Co, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gmat.T @ cols).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(B, Ho, Wo, Ci, k, k)
            gxp = np.zeros((B, Ci, Hp, Wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3), keepdims=True)

    return T.from_op(np.ascontiguousarray(out), parents, vjp)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation from ``n_in`` to ``n_out`` samples."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    H, W = x.shape[2:]
    key_h, key_w = (size[0], H), (size[1], W)
    for key in (key_h, key_w):
        if key not in _BILINEAR_CACHE:
            _BILINEAR_CACHE[key] = bilinear_matrix(*key)
    return T.spatial_linear(x, _BILINEAR_CACHE[key_h], _BILINEAR_CACHE[key_w])
