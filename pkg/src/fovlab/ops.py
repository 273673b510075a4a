"""Dense tensor operations for the small CNN.

Images and activations are plain numpy arrays, (C, H, W) row-major, float32
in the product data path. Every op is a pure function; gradients are exposed
as separate *_grad functions that recompute whatever they need from the
forward inputs, so callers can cache nothing but the layer inputs.
"""

from typing import NamedTuple

import numpy as np


class Norms(NamedTuple):
    l1_per_pixel: float
    linf: float


def norms(t: np.ndarray) -> Norms:
    """L1-per-element and max-abs norms of a tensor."""
    if t.size == 0:
        return Norms(0.0, 0.0)
    a = np.abs(t)
    return Norms(float(a.sum() / t.size), float(a.max()))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold (C, H, W) into (out_h*out_w, C*kh*kw) patch rows."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, out_h, out_w, kh, kw)
    c, oh, ow = windows.shape[:3]
    return windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw), oh, ow


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate (C, H, W) with (F, C, kh, kw) kernels, zero padding.

    Output is (F, out_h, out_w) with out_h = floor((H + 2*pad - kh)/stride) + 1.
    """
    if x.ndim != 3 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) input and (F,C,kh,kw) kernels, "
                         f"got {x.shape} and {kernels.shape}")
    c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if kc != c:
        raise ValueError(f"kernel channels {kc} do not match input channels {c}")
    if bias.shape != (f,):
        raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input "
                         f"{h + 2 * pad}x{w + 2 * pad}")
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = cols @ kernels.reshape(f, -1).T + bias
    return np.ascontiguousarray(out.reshape(oh, ow, f).transpose(2, 0, 1))


def _col2im(dcols: np.ndarray, c: int, h: int, w: int,
            kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patch-row gradients back onto the (C, H, W) image."""
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    img = np.zeros((c, hp, wp), dtype=dcols.dtype)
    dcols = dcols.reshape(oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            img[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, :, :, i, j].transpose(2, 0, 1)
    if pad:
        img = img[:, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(img)


def conv2d_input_grad(grad_out: np.ndarray, kernels: np.ndarray,
                      x_shape: tuple, stride: int = 1, pad: int = 0) -> np.ndarray:
    f = kernels.shape[0]
    g = grad_out.transpose(1, 2, 0).reshape(-1, f)
    dcols = g @ kernels.reshape(f, -1)
    c, h, w = x_shape
    kh, kw = kernels.shape[2], kernels.shape[3]
    return _col2im(dcols, c, h, w, kh, kw, stride, pad)


def conv2d_weight_grad(grad_out: np.ndarray, x: np.ndarray, kernels_shape: tuple,
                       stride: int = 1, pad: int = 0):
    f, c, kh, kw = kernels_shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    g = grad_out.transpose(1, 2, 0).reshape(-1, f)
    dk = (g.T @ cols).reshape(f, c, kh, kw)
    db = g.sum(axis=0)
    return dk, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool2(x: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2. Spatial dims must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    return win.reshape(c, h // 2, w // 2, 4).max(axis=3)


def maxpool2_grad(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Route gradient to the argmax cell of each window (first cell on ties)."""
    c, h, w = x.shape
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = win.argmax(axis=3)  # row-major within window, first occurrence on ties
    flat = np.zeros_like(win)
    np.put_along_axis(flat, arg[..., None], grad_out[..., None], axis=3)
    return np.ascontiguousarray(
        flat.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """weights (m, n) @ x (n,) + bias (m,)."""
    if x.ndim != 1 or weights.ndim != 2 or weights.shape[1] != x.shape[0]:
        raise ValueError(f"dense shape mismatch: weights {weights.shape}, input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"dense bias shape {bias.shape} != ({weights.shape[0]},)")
    return weights @ x + bias


def dense_grads(grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray):
    gx = weights.T @ grad_out
    gw = np.outer(grad_out, x)
    gb = grad_out.copy()
    return gx, gw, gb


def _resize_coords(n_in: int, n_out: int):
    """Sample coordinates for one axis: centers at (i+0.5)*scale - 0.5, edge-clamped."""
    scale = n_in / n_out
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    centers = np.clip(centers, 0.0, n_in - 1.0)
    i0 = np.floor(centers).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = centers - i0
    return i0, i1, frac


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample (C, H, W) to (C, out_h, out_w).

    Linear in the input by construction: the sampling weights depend only on
    the shapes. Accumulates in float64 and casts back to the input dtype.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    c, h, w = x.shape
    y0, y1, fy = _resize_coords(h, out_h)
    x0, x1, fx = _resize_coords(w, out_w)
    xf = x.astype(np.float64, copy=False)
    top = xf[:, y0][:, :, x0] * (1 - fx) + xf[:, y0][:, :, x1] * fx
    bot = xf[:, y1][:, :, x0] * (1 - fx) + xf[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out.astype(x.dtype, copy=False)


def bilinear_resize_grad(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Adjoint of bilinear_resize: scatter output gradient with the same weights."""
    c, oh, ow = grad_out.shape
    y0, y1, fy = _resize_coords(in_h, oh)
    x0, x1, fx = _resize_coords(in_w, ow)
    g = grad_out.astype(np.float64, copy=False)
    gi = np.zeros((c, in_h, in_w), dtype=np.float64)
    wy = [(y0, 1 - fy), (y1, fy)]
    wx = [(x0, 1 - fx), (x1, fx)]
    for yi, wyv in wy:
        for xi, wxv in wx:
            contrib = g * wyv[None, :, None] * wxv[None, None, :]
            np.add.at(gi, (slice(None), yi[:, None], xi[None, :]), contrib)
    return gi.astype(grad_out.dtype, copy=False)
