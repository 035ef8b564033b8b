"""Single-sample layer primitives: convolution, max-pooling, ReLU and dense.

Images are channel-major ``(C, H, W)`` float arrays. Convolution uses the
cross-correlation convention (kernels are not flipped), so stored kernels must
be read as ``(K, C, kh, kw)`` correlation filters. Padding is either zeros or
a mirror reflection that excludes the edge pixel; both are linear in the input.

Every forward op has a matching backward op that takes the gradient of the
output and returns gradients of the inputs. Summation order is fixed (window
offsets are visited row-major), so repeated calls are bit-identical.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


def _out_extent(size: int, k: int, stride: int, pad: int, what: str) -> int:
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{what}: window {k} larger than padded extent {size + 2 * pad}")
    if span % stride:
        raise ShapeError(
            f"{what}: extent {size} (pad {pad}) does not tile with window {k} and stride {stride}"
        )
    return span // stride + 1


PAD_MODES = ("zeros", "reflect")


def _pad_index(n: int, pad: int, mode: str) -> np.ndarray:
    """Source index of every padded position along one axis."""
    idx = np.arange(-pad, n + pad)
    if mode == "reflect":
        if pad >= n:
            raise ShapeError(f"reflect padding {pad} needs an extent larger than {n}")
        idx = np.abs(idx)
        idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
    return idx


def pad2d(x: np.ndarray, pad: int, mode: str = "zeros") -> np.ndarray:
    if not pad:
        return x
    if mode == "zeros":
        return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if mode not in PAD_MODES:
        raise ShapeError(f"unknown padding mode {mode!r}")
    return x[:, _pad_index(x.shape[1], pad, mode)][:, :, _pad_index(x.shape[2], pad, mode)]


def unpad2d(grad: np.ndarray, shape: tuple[int, ...], pad: int, mode: str = "zeros") -> np.ndarray:
    """Adjoint of :func:`pad2d`: fold the padded gradient back onto the input grid."""
    if not pad:
        return grad
    if mode == "zeros":
        return grad[:, pad : pad + shape[1], pad : pad + shape[2]]
    rows = np.zeros((grad.shape[1], shape[1]), grad.dtype)
    rows[np.arange(grad.shape[1]), _pad_index(shape[1], pad, mode)] = 1
    cols = np.zeros((grad.shape[2], shape[2]), grad.dtype)
    cols[np.arange(grad.shape[2]), _pad_index(shape[2], pad, mode)] = 1
    return rows.T @ grad @ cols


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (C, Ho, Wo, kh, kw) read-only view
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def conv2d_forward(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0, pad_mode: str = "zeros"
) -> np.ndarray:
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects input (C,H,W) and kernel (K,C,kh,kw); got {x.shape} and {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / pad {pad}")
    c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels but kernel {kernel.shape} expects {kc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    _out_extent(h, kh, stride, pad, "conv2d height")
    _out_extent(w, kw, stride, pad, "conv2d width")
    xp = pad2d(x, pad, pad_mode)
    cols = _windows(xp, kh, kw, stride)
    out = np.tensordot(kernel, cols, axes=([1, 2, 3], [0, 3, 4]))
    out += bias[:, None, None]
    return out.astype(x.dtype, copy=False)


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0, pad_mode: str = "zeros"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_kernel, grad_bias)`` for one convolution."""
    _, kc, kh, kw = kernel.shape
    xp = pad2d(x, pad, pad_mode)
    cols = _windows(xp, kh, kw, stride)
    grad_kernel = np.tensordot(grad_out, cols, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))

    _, ho, wo = grad_out.shape
    gxp = np.zeros_like(xp)
    for dy in range(kh):
        for dx in range(kw):
            # (C, Ho, Wo) contribution of this kernel tap
            contrib = np.tensordot(kernel[:, :, dy, dx], grad_out, axes=([0], [0]))
            gxp[:, dy : dy + stride * ho : stride, dx : dx + stride * wo : stride] += contrib
    grad_input = unpad2d(gxp, x.shape, pad, pad_mode)
    return grad_input, grad_kernel.astype(x.dtype, copy=False), grad_bias


def maxpool_forward(x: np.ndarray, window: int, stride: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Max over each window; also returns the winner's flat offset inside its window.

    Ties resolve to the first cell in row-major scan order.
    """
    stride = window if stride is None else stride
    if x.ndim != 3:
        raise ShapeError(f"maxpool expects (C,H,W); got {x.shape}")
    _out_extent(x.shape[1], window, stride, 0, "maxpool height")
    _out_extent(x.shape[2], window, stride, 0, "maxpool width")
    wins = _windows(x, window, window, stride)
    flat = wins.reshape(wins.shape[:3] + (window * window,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(
    grad_out: np.ndarray, indices: np.ndarray, input_shape: tuple[int, ...], window: int, stride: int | None = None
) -> np.ndarray:
    stride = window if stride is None else stride
    c, ho, wo = grad_out.shape
    grad = np.zeros(input_shape, dtype=grad_out.dtype)
    rows = (np.arange(ho) * stride)[None, :, None] + indices // window
    cols = (np.arange(wo) * stride)[None, None, :] + indices % window
    chans = np.broadcast_to(np.arange(c)[:, None, None], indices.shape)
    np.add.at(grad, (chans, rows, cols), grad_out)
    return grad


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Gate by the recorded forward output: zero activations pass no gradient."""
    return np.where(out > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 1 or weight.ndim != 2 or weight.shape[1] != x.shape[0] or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"dense: input {x.shape}, weight {weight.shape}, bias {bias.shape} are incompatible"
        )
    return (weight @ x + bias).astype(x.dtype, copy=False)


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return weight.T @ grad_out, np.outer(grad_out, x).astype(x.dtype, copy=False), grad_out.copy()
