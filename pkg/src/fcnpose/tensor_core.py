"""Dense tensor primitives: forward and backward passes for every layer type.

Tensors are plain numpy arrays. The public API follows the channels-first
convention, ``(C, H, W)`` for a single image or ``(N, C, H, W)`` for a batch.
Internally the heavy kernels run channels-last (NHWC) so that the inner loops
of im2col, pooling, and the convolution scatter all touch contiguous memory;
the ``*_nhwc`` functions expose that fast path to callers that keep whole
layer stacks in NHWC (see :mod:`fcnpose.network`).

All convolutions are 3x3, stride 1, zero "same" padding, which is the only
geometry the FCN-Pose architecture uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation

__all__ = [
    "ConvKernel",
    "Workspace",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2",
    "maxpool2_backward",
    "upsample_nearest",
    "upsample_nearest_backward",
    "relu",
    "relu_backward",
    "sigmoid",
    "sigmoid_backward",
    "bce_loss",
]

BCE_EPS = 1e-7


@dataclass
class ConvKernel:
    """Weights of one 3x3 convolution layer.

    ``weights`` has shape ``(out_channels, in_channels, 3, 3)`` and ``biases``
    shape ``(out_channels,)``.
    """

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ContractViolation(
                f"conv weights must be (out, in, 3, 3), got {self.weights.shape}"
            )
        if self.biases.shape != (self.weights.shape[0],):
            raise ContractViolation(
                f"bias count {self.biases.shape} does not match "
                f"{self.weights.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.biases.copy())


@dataclass
class Workspace:
    """Reusable scratch buffers keyed by caller-chosen slot.

    A forward/backward pass over a fixed architecture allocates the same
    large im2col buffers every step; routing them through a workspace avoids
    the realloc-and-fault cost. A workspace is single-threaded state: share
    models across threads, not workspaces.
    """

    _bufs: dict = field(default_factory=dict)

    def get(self, slot, shape, dtype=np.float32) -> np.ndarray:
        key = (slot, shape, np.dtype(dtype))
        buf = self._bufs.get(key)
        if buf is None:
            buf = np.empty(shape, dtype)
            self._bufs[key] = buf
        return buf

    def get_zero_border(self, slot, shape, dtype=np.float32) -> np.ndarray:
        """Buffer whose 1-pixel spatial border stays zero between uses.

        Callers overwrite the interior only, so the border zeros written at
        allocation time persist across reuses.
        """
        key = (slot, "zb", shape, np.dtype(dtype))
        buf = self._bufs.get(key)
        if buf is None:
            buf = np.zeros(shape, dtype)
            self._bufs[key] = buf
        return buf


# ---------------------------------------------------------------------------
# NHWC fast path
# ---------------------------------------------------------------------------

def kernel_matrix(kernel: ConvKernel) -> np.ndarray:
    """Flatten kernel weights to ``(out, 9*in)`` with (ky, kx, c) column order."""
    o = kernel.out_channels
    return np.ascontiguousarray(
        kernel.weights.transpose(0, 2, 3, 1).reshape(o, -1)
    )


def matrix_to_weights(wmat: np.ndarray, in_channels: int) -> np.ndarray:
    """Inverse of :func:`kernel_matrix`: back to ``(out, in, 3, 3)``."""
    o = wmat.shape[0]
    return np.ascontiguousarray(
        wmat.reshape(o, 3, 3, in_channels).transpose(0, 3, 1, 2)
    )


def _im2col_nhwc(x: np.ndarray, ws: Workspace, slot) -> np.ndarray:
    n, h, w, c = x.shape
    xp = ws.get_zero_border((slot, "pad"), (n, h + 2, w + 2, c), x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N,H,W,C,3,3)
    cols = ws.get((slot, "cols"), (n * h * w, 9 * c), x.dtype)
    cols.reshape(n, h, w, 3, 3, c)[...] = win.transpose(0, 1, 2, 4, 5, 3)
    return cols

def conv2d_fwd_nhwc(x, wmat, biases, ws: Workspace, slot=0):
    """Same-padded 3x3 convolution on an NHWC batch.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix needed by the
    matching backward call and is only valid until the slot is reused.
    """
    n, h, w, _ = x.shape
    o = wmat.shape[0]
    cols = _im2col_nhwc(x, ws, slot)
    out = cols @ wmat.T
    out += biases
    return out.reshape(n, h, w, o), cols


def conv2d_bwd_nhwc(cols, x_shape, wmat, upstream, ws: Workspace, slot=0,
                    need_dx=True):
    """Gradients of :func:`conv2d_fwd_nhwc`.

    Returns ``(dx, dwmat, dbias)`` with ``dwmat`` in kernel-matrix layout;
    ``dx`` is None when ``need_dx`` is false (first layer of a net).
    """
    n, h, w, c = x_shape
    o = wmat.shape[0]
    upf = upstream.reshape(-1, o)
    dbias = upf.sum(axis=0)
    dwmat = upf.T @ cols
    if not need_dx:
        return None, dwmat, dbias
    g = ws.get((slot, "dcols"), (n * h * w, 9 * c), upstream.dtype)
    np.matmul(upf, wmat, out=g)
    g6 = g.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=upstream.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += g6[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :], dwmat, dbias


def maxpool2_fwd_nhwc(x):
    """2x2/stride-2 max pool; returns ``(pooled, argmax)``.

    ``argmax`` holds, per output cell, the within-window winner in scan order
    (0=top-left, 1=top-right, 2=bottom-left, 3=bottom-right); ties go to the
    first index, making backward deterministic.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"maxpool2 needs even H and W, got {h}x{w}")
    v = x.reshape(n, h // 2, 2, w // 2, 2, c)
    cand = np.stack(
        (v[:, :, 0, :, 0], v[:, :, 0, :, 1], v[:, :, 1, :, 0], v[:, :, 1, :, 1]),
        axis=-1,
    )
    idx = cand.argmax(axis=-1).astype(np.uint8)
    out = np.max(cand, axis=-1)
    return out, idx


def maxpool2_bwd_nhwc(upstream, argmax):
    n, h2, w2, c = upstream.shape
    dx = np.zeros((n, h2, 2, w2, 2, c), dtype=upstream.dtype)
    for k, (dy, dxo) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        sel = argmax == k
        dst = dx[:, :, dy, :, dxo]
        dst[sel] = upstream[sel]
    return dx.reshape(n, h2 * 2, w2 * 2, c)


def upsample_fwd_nhwc(x, factor: int):
    n, h, w, c = x.shape
    rep = np.broadcast_to(
        x[:, :, None, :, None, :], (n, h, factor, w, factor, c)
    )
    return rep.reshape(n, h * factor, w * factor, c)


def upsample_bwd_nhwc(upstream, factor: int):
    n, hf, wf, c = upstream.shape
    return upstream.reshape(
        n, hf // factor, factor, wf // factor, factor, c
    ).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# Public channels-first API
# ---------------------------------------------------------------------------

def _to_batched_nhwc(x):
    """Accept (C,H,W) or (N,C,H,W); return (nhwc array, had_batch flag)."""
    x = np.asarray(x)
    if x.ndim == 3:
        return np.ascontiguousarray(x.transpose(1, 2, 0))[None], False
    if x.ndim == 4:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1)), True
    raise ContractViolation(f"expected rank-3/4 tensor, got rank {x.ndim}")


def _from_batched_nhwc(y, had_batch):
    y = y.transpose(0, 3, 1, 2)
    out = y if had_batch else y[0]
    return np.ascontiguousarray(out)


def conv2d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """3x3 convolution, stride 1, zero same-padding: output keeps H and W.

    out[o, y, x] = bias[o] + sum_{c,ky,kx} in[c, y+ky-1, x+kx-1] * w[o, c, ky, kx]
    with out-of-bounds input reads taken as zero.
    """
    xb, had_batch = _to_batched_nhwc(x)
    if xb.shape[3] != kernel.in_channels:
        raise ContractViolation(
            f"input has {xb.shape[3]} channels, kernel expects {kernel.in_channels}"
        )
    y, _ = conv2d_fwd_nhwc(xb, kernel_matrix(kernel), kernel.biases, Workspace())
    return _from_batched_nhwc(y, had_batch)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, upstream: np.ndarray):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(input_grad, weight_grad, bias_grad)`` shaped like the input,
    the kernel weights, and the biases respectively.
    """
    xb, had_batch = _to_batched_nhwc(x)
    ub, u_batch = _to_batched_nhwc(upstream)
    if xb.shape[3] != kernel.in_channels:
        raise ContractViolation(
            f"input has {xb.shape[3]} channels, kernel expects {kernel.in_channels}"
        )
    if u_batch != had_batch or ub.shape[:3] != xb.shape[:3] \
            or ub.shape[3] != kernel.out_channels:
        raise ContractViolation(
            f"upstream shape {np.asarray(upstream).shape} does not match "
            f"conv output for input {np.asarray(x).shape}"
        )
    ws = Workspace()
    cols = _im2col_nhwc(xb, ws, 0)
    dx, dwmat, dbias = conv2d_bwd_nhwc(
        cols, xb.shape, kernel_matrix(kernel), ub, ws
    )
    dw = matrix_to_weights(dwmat, kernel.in_channels)
    return _from_batched_nhwc(dx, had_batch), dw, dbias


def maxpool2(x: np.ndarray):
    """2x2 max pooling with stride 2; returns ``(pooled, argmax_record)``."""
    xb, had_batch = _to_batched_nhwc(x)
    y, idx = maxpool2_fwd_nhwc(xb)
    return _from_batched_nhwc(y, had_batch), (idx, had_batch)


def maxpool2_backward(upstream: np.ndarray, argmax_record) -> np.ndarray:
    """Route gradients to the recorded argmax of each 2x2 window."""
    idx, had_batch = argmax_record
    ub, u_batch = _to_batched_nhwc(upstream)
    if u_batch != had_batch or ub.shape != idx.shape:
        raise ContractViolation(
            f"upstream shape {np.asarray(upstream).shape} does not match pool record"
        )
    return _from_batched_nhwc(maxpool2_bwd_nhwc(ub, idx), had_batch)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling by an integral factor (2 or 4)."""
    if factor not in (2, 4):
        raise ContractViolation(f"upsample factor must be 2 or 4, got {factor}")
    xb, had_batch = _to_batched_nhwc(x)
    return _from_batched_nhwc(upsample_fwd_nhwc(xb, factor), had_batch)


def upsample_nearest_backward(upstream: np.ndarray, factor: int) -> np.ndarray:
    """Sum gradients over each replicated block."""
    if factor not in (2, 4):
        raise ContractViolation(f"upsample factor must be 2 or 4, got {factor}")
    ub, had_batch = _to_batched_nhwc(upstream)
    return _from_batched_nhwc(upsample_bwd_nhwc(ub, factor), had_batch)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(upstream: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.asarray(upstream) * (np.asarray(x) > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function; output in (0, 1) up to rounding
    (saturated inputs round to exactly 0.0 or 1.0 in float32)."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float32)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(upstream: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given the forward *output*."""
    return np.asarray(upstream) * out * (1.0 - out)


def sigmoid_inplace_nhwc(x: np.ndarray) -> np.ndarray:
    """In-place stable sigmoid for the network hot path."""
    np.clip(x, -60.0, 60.0, out=x)
    np.negative(x, out=x)
    np.exp(x, out=x)
    x += 1.0
    np.reciprocal(x, out=x)
    return x


def bce_loss(pred: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy and its gradient with respect to ``pred``.

    Predictions are clamped to ``[BCE_EPS, 1 - BCE_EPS]`` before the logs;
    the gradient is zero where the clamp is active.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ContractViolation(
            f"pred shape {pred.shape} != target shape {target.shape}"
        )
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).mean()
    inside = (pred >= BCE_EPS) & (pred <= 1.0 - BCE_EPS)
    grad = (p - target) / (p * (1.0 - p) * p.size)
    grad = np.where(inside, grad, 0.0).astype(pred.dtype, copy=False)
    return float(loss), grad
