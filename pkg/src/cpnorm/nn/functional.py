"""Stateless layer primitives with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes ``(grad_output, cache)``. Arrays keep the dtype of
their inputs so the same code serves float32 training and float64 gradient
checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Rows are receptive fields ``(n, oh, ow)``, columns ``(kh, kw, c)``.

    Windows are gathered from a channels-last copy so that every inner copy
    moves a contiguous run of ``c`` values.
    """
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    n, oh, ow, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add receptive fields back."""
    n, c, h, w = x_shape
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    out = out[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``weight`` (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ShapeError(f"input has {c} channels, weight expects {c_w}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {h}x{w}")
    cols = im2col(x, kh, kw, stride, padding)
    wmat = weight.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    cache = (x.shape, cols, weight, stride, padding, bias is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache, need_input_grad: bool = True):
    """Returns ``(grad_input, grad_weight, grad_bias)``.

    The input gradient is accumulated tap by tap in channels-last layout,
    which avoids materialising and transposing the full column matrix.
    """
    x_shape, cols, weight, stride, padding, has_bias = cache
    o, c, kh, kw = weight.shape
    n, _, h, w = x_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = np.ascontiguousarray((g.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
    grad_b = g.sum(axis=0) if has_bias else None
    if not need_input_grad:
        return None, grad_w, grad_b
    # contiguous per-tap (O, C) blocks keep the matmuls on the BLAS path
    taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
    g = np.ascontiguousarray(g)
    acc = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            tap = (g @ taps[i, j]).reshape(n, oh, ow, c)
            acc[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += tap
    if padding:
        acc = acc[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2)), grad_w, grad_b


def linear_forward(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear layer expects (N, {weight.shape[1]}) input, got {x.shape}")
    out = x @ weight.T
    if bias is not None:
        out += bias
    return out, (x, weight, bias is not None)


def linear_backward(grad_out, cache):
    x, weight, has_bias = cache
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if has_bias else None
    return grad_out @ weight, grad_w, grad_b


def maxpool2d_forward(x, k: int = 2):
    """Non-overlapping ``k x k`` max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool {k}x{k} does not fit {h}x{w} input")
    xc = x[:, :, :oh * k, :ow * k]
    win = xc.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx, k)


def maxpool2d_backward(grad_out, cache):
    x_shape, idx, k = cache
    n, c, h, w = x_shape
    oh, ow = idx.shape[2], idx.shape[3]
    win = np.zeros((n, c, oh, ow, k * k), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    grad_x[:, :, :oh * k, :ow * k] = win
    return grad_x


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def dropout_forward(x, keep_prob: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity when ``train`` is false or ``keep_prob == 1``."""
    if not train or keep_prob >= 1.0:
        return x, None
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels``; returns ``(loss, grad_logits)``."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad
