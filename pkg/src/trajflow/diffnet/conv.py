"""Convolutional backbone primitives: conv, pooling, batch norm, resize.

All spatial layers operate on single (H, W, C) images in float64.
'Same'-padded stride-1 convolutions run as im2col matmuls; the input
gradient reuses the same machinery as a correlation with the flipped
kernel. Bilinear upsampling is separable, so it and its backward are a
pair of cached weight-matrix products.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _im2col(image: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(H, W, C) -> (H*W, kh*kw*C) patches under same zero padding."""
    h, w, c = image.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(image, ((ph, ph), (pw, pw), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))
    # (H, W, C, kh, kw) -> (H*W, kh*kw*C)
    return windows.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * c)


def conv2d(x, kernel, bias):
    """Same-padded stride-1 convolution of a (H, W, Cin) image.

    Kernel layout is (kh, kw, Cin, Cout); kh and kw must be odd.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    h, w, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin or bias.data.shape != (cout,):
        raise ShapeError(
            f"conv2d: x {x.shape} incompatible with kernel {kernel.shape}, "
            f"bias {bias.shape}")
    cols = _im2col(x.data, kh, kw)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    y = (cols @ wmat + bias.data).reshape(h, w, cout)

    def bwd(g):
        gflat = g.reshape(h * w, cout)
        bias.accumulate(gflat.sum(axis=0))
        kernel.accumulate((cols.T @ gflat).reshape(kh, kw, cin, cout))
        flipped = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh,kw,Cout,Cin)
        gcols = _im2col(g, kh, kw)
        x.accumulate((gcols @ flipped.reshape(kh * kw * cout, cin)).reshape(h, w, cin))
    return make_node(y, (x, kernel, bias), bwd)


def maxpool2x2(x):
    x = as_tensor(x)
    h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: odd spatial dims {x.shape}")
    blocks = x.data.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3)
    flat = blocks.reshape(h // 2, w // 2, c, 4)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        buf = np.zeros((h // 2, w // 2, c, 4))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(h // 2, w // 2, c, 2, 2).transpose(0, 3, 1, 4, 2)
        x.accumulate(buf.reshape(h, w, c))
    return make_node(y, (x,), bwd)


def batch_norm2d(x, gain, shift, running_mean, running_var, mode: str,
                 momentum: float = BN_MOMENTUM):
    """Per-channel batch normalization of one (H, W, C) image.

    Train mode standardizes by the image's own spatial statistics and
    updates the running buffers in place; eval mode uses the buffers and
    is a fixed affine map.
    """
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    h, w, c = x.data.shape
    n = h * w
    if mode == "train":
        mu = x.data.mean(axis=(0, 1))
        var = x.data.var(axis=(0, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    elif mode == "eval":
        mu = running_mean
        var = running_var
    else:
        raise ShapeError(f"batch_norm2d: unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mu) * inv_std
    y = gain.data * xhat + shift.data

    def bwd(g):
        gain.accumulate((g * xhat).sum(axis=(0, 1)))
        shift.accumulate(g.sum(axis=(0, 1)))
        dxhat = g * gain.data
        if mode == "eval":
            x.accumulate(dxhat * inv_std)
            return
        centered = x.data - mu
        dvar = (dxhat * centered).sum(axis=(0, 1)) * (-0.5) * inv_std**3
        dmu = dxhat.sum(axis=(0, 1)) * (-inv_std) + dvar * (-2.0 / n) * centered.sum(axis=(0, 1))
        x.accumulate(dxhat * inv_std + dvar * 2.0 * centered / n + dmu / n)
    return make_node(y, (x, gain, shift), bwd)


def dropout(x, p: float, rng: np.random.Generator, mode: str):
    """Inverted dropout; identity in eval mode."""
    x = as_tensor(x)
    if mode == "eval" or p == 0.0:
        def bwd_id(g):
            x.accumulate(g)
        return make_node(x.data.copy(), (x,), bwd_id)
    keep = rng.random(x.data.shape) >= p
    factor = keep / (1.0 - p)

    def bwd(g):
        x.accumulate(g * factor)
    return make_node(x.data * factor, (x,), bwd)


@functools.lru_cache(maxsize=32)
def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation weights, half-pixel centers."""
    weights = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        coord = np.clip((o + 0.5) * scale - 0.5, 0.0, n_in - 1)
        i0 = min(int(np.floor(coord)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = coord - i0
        weights[o, i0] += 1.0 - frac
        weights[o, i1] += frac
    return weights


def _separable_apply(wr, wc, image):
    """out[o, p, c] = sum_ij wr[o, i] image[i, j, c] wc[p, j]."""
    rows = np.tensordot(wr, image, axes=(1, 0))
    return np.tensordot(rows, wc, axes=(1, 1)).transpose(0, 2, 1)


def upsample_bilinear(x, out_hw: tuple[int, int]):
    """Separable bilinear resize of a (h, w, C) image to (H, W, C)."""
    x = as_tensor(x)
    h, w, _ = x.data.shape
    wr = _resize_weights(h, out_hw[0])
    wc = _resize_weights(w, out_hw[1])
    y = _separable_apply(wr, wc, x.data)

    def bwd(g):
        x.accumulate(_separable_apply(wr.T, wc.T, g))
    return make_node(y, (x,), bwd)
