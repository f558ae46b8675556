"""Vectorized numpy implementations of the hot conv/pool kernels.

This is the fallback backend used when the compiled extension is not
available (see `protopipe.kernels`). Both backends implement the same
contracts: 3x3 convolution with stride 1 and zero padding 1, and 2x2
max-pooling with stride 2 that routes ties to the first maximum in
(top-left, top-right, bottom-left, bottom-right) scan order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w):
    """x: [B,C,H,W], w: [F,C,3,3] -> y: [B,F,H,W]."""
    b, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.zeros((b, c, h + 2, wd + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    # cols: [B,C,H,W,3,3] windows over the padded input
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, c * 9)
    y = cols2 @ w.reshape(f, c * 9).T
    return np.ascontiguousarray(y.reshape(b, h, wd, f).transpose(0, 3, 1, 2))


def conv3x3_backward(x, w, gy):
    """Gradients of conv3x3_forward; returns (gx, gw)."""
    b, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.zeros((b, c, h + 2, wd + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, c * 9)
    gy2 = gy.transpose(0, 2, 3, 1).reshape(b * h * wd, f)
    gw = (gy2.T @ cols2).reshape(f, c, 3, 3)
    # gx is the full correlation of gy with the spatially flipped kernels
    gyp = np.zeros((b, f, h + 2, wd + 2), dtype=np.float64)
    gyp[:, :, 1:-1, 1:-1] = gy
    gcols = sliding_window_view(gyp, (3, 3), axis=(2, 3))
    gcols2 = gcols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, f * 9)
    wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * 9)
    gx = gcols2 @ wflip.T
    return np.ascontiguousarray(gx.reshape(b, h, wd, c).transpose(0, 3, 1, 2)), gw


def maxpool2x2_forward(x):
    """x: [B,C,H,W] with even H,W -> (y: [B,C,H/2,W/2], idx: uint8 winners)."""
    b, c, h, wd = x.shape
    xr = x.reshape(b, c, h // 2, 2, wd // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = xr.reshape(b, c, h // 2, wd // 2, 4)
    idx = np.argmax(flat, axis=-1).astype(np.uint8)
    y = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(idx, gy, h, w):
    """Scatter gy back to the argmax positions of the forward pass."""
    b, c, ho, wo = gy.shape
    flat = np.zeros((b, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(flat, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = flat.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return np.ascontiguousarray(gx)
