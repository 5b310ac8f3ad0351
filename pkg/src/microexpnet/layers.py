"""Layer forward/backward passes, initialization, dropout, and Adam.

Every backward pass here is hand-derived and checked against the
central-difference oracle in the tests. Layout is NHWC throughout.
Convolutions use same-ceil zero padding: the output spatial size is
ceil(input / stride) and when the total padding is odd the extra row or
column goes on the bottom/right. Max pooling is fixed 2x2 at stride 2 in
ceil mode, so edge windows may be truncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import relu, relu_backward

LOG_CLAMP = 1e-12


def _ceil_div(n: int, d: int) -> int:
    return -(-n // d)


def _pad_split(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size plus (leading, trailing) zero padding for one axis."""
    out = _ceil_div(size, stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise DimensionError(f"expected HxWxC or NxHxWxC input, got shape {list(arr.shape)}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Gather every receptive field of a padded NHWC batch into rows.

    Returns (cols, (out_h, out_w)) where cols has shape
    (n, out_h, out_w, kh*kw*c) and each row is laid out kernel-row-major
    with channels innermost, matching a kernel reshaped to (kh*kw*c, out).
    """
    n, h, w, c = x.shape
    out_h, pad_top, pad_bottom = _pad_split(h, kh, stride)
    out_w, pad_left, pad_right = _pad_split(w, kw, stride)
    if pad_top or pad_bottom or pad_left or pad_right:
        x = np.pad(x, ((0, 0), (pad_top, pad_bottom), (pad_left, pad_right), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(n, out_h, out_w, kh * kw * c), (out_h, out_w)


def xavier_init(shape, rng) -> np.ndarray:
    """Uniform Glorot initialization for dense (in, out) or conv
    (kh, kw, in, out) weight shapes. ``rng`` is a seed or a numpy Generator.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if len(shape) == 2:
        fan_in, fan_out = int(shape[0]), int(shape[1])
    elif len(shape) == 4:
        kh, kw, c_in, c_out = (int(d) for d in shape)
        fan_in = kh * kw * c_in
        fan_out = kh * kw * c_out
    else:
        raise ValidationError(f"cannot derive fan-in/fan-out for shape {list(shape)}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=tuple(shape)).astype(np.float32)


@dataclass
class ConvLayer:
    """2-D convolution weights: kernel (kh, kw, c_in, c_out) plus bias."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int

    @classmethod
    def create(cls, kh: int, kw: int, c_in: int, c_out: int, stride: int, rng):
        return cls(
            kernel=xavier_init((kh, kw, c_in, c_out), rng),
            bias=np.zeros(c_out, dtype=np.float32),
            stride=stride,
        )


def conv_forward(layer: ConvLayer, x, return_cols: bool = False):
    """Convolve an NHWC batch (or a single HWC image) with same-ceil padding.

    With ``return_cols=True`` also returns the gathered receptive-field
    matrix so a following backward pass can skip regathering it.
    """
    x4, squeezed = _as_batch(x)
    kh, kw, c_in, c_out = layer.kernel.shape
    if x4.shape[3] != c_in:
        raise DimensionError(
            f"conv: input has {x4.shape[3]} channels, kernel expects {c_in}"
        )
    cols, (out_h, out_w) = _im2col(x4, kh, kw, layer.stride)
    n = x4.shape[0]
    out = cols.reshape(n * out_h * out_w, kh * kw * c_in) @ layer.kernel.reshape(
        kh * kw * c_in, c_out
    )
    out += layer.bias
    out = out.reshape(n, out_h, out_w, c_out)
    if squeezed:
        out = out[0]
    return (out, cols) if return_cols else out


def conv_backward(
    layer: ConvLayer,
    x,
    upstream,
    cols: np.ndarray | None = None,
    need_input_grad: bool = True,
):
    """Gradients of a convolution: (d_input, d_kernel, d_bias).

    ``cols`` may carry the receptive-field matrix cached from the forward
    pass. When ``need_input_grad`` is false, d_input is returned as None;
    the scatter back to input space is the most expensive step and the
    first layer of a network never needs it.
    """
    x4, squeezed = _as_batch(x)
    kh, kw, c_in, c_out = layer.kernel.shape
    n, h, w, _ = x4.shape
    out_h, pad_top, pad_bottom = _pad_split(h, kh, layer.stride)
    out_w, pad_left, pad_right = _pad_split(w, kw, layer.stride)
    up4, _ = _as_batch(upstream)
    if up4.shape != (n, out_h, out_w, c_out):
        raise DimensionError(
            f"conv backward: upstream shape {list(up4.shape)} does not match "
            f"output {[n, out_h, out_w, c_out]}"
        )
    if cols is None:
        cols, _ = _im2col(x4, kh, kw, layer.stride)
    k = kh * kw * c_in
    up_mat = up4.reshape(n * out_h * out_w, c_out)
    d_kernel = (cols.reshape(n * out_h * out_w, k).T @ up_mat).reshape(layer.kernel.shape)
    d_bias = up_mat.sum(axis=0)
    d_input = None
    if need_input_grad:
        d_cols = (up_mat @ layer.kernel.reshape(k, c_out).T).reshape(
            n, out_h, out_w, kh, kw, c_in
        )
        padded = np.zeros(
            (n, h + pad_top + pad_bottom, w + pad_left + pad_right, c_in),
            dtype=d_cols.dtype,
        )
        s = layer.stride
        for di in range(kh):
            for dj in range(kw):
                padded[:, di : di + out_h * s : s, dj : dj + out_w * s : s, :] += d_cols[
                    :, :, :, di, dj, :
                ]
        d_input = padded[:, pad_top : pad_top + h, pad_left : pad_left + w, :]
        d_input = d_input[0] if squeezed else np.ascontiguousarray(d_input)
    return d_input, d_kernel, d_bias


@dataclass
class MaxPoolLayer:
    """2x2 stride-2 max pooling in ceil mode (edge windows may be truncated)."""

    kernel: int = 2
    stride: int = 2


class PoolCache(NamedTuple):
    """Winner offsets (0..3, row-major within each window) plus input geometry."""

    indices: np.ndarray
    input_shape: tuple
    squeezed: bool


def maxpool_forward(layer: MaxPoolLayer, x):
    """Pool an NHWC batch; returns (output, cache) where the cache routes
    gradients back to each window's first maximal element."""
    if layer.kernel != 2 or layer.stride != 2:
        raise ValidationError("only 2x2 stride-2 pooling is supported")
    x4, squeezed = _as_batch(x)
    n, h, w, c = x4.shape
    out_h, out_w = _ceil_div(h, 2), _ceil_div(w, 2)
    if h != 2 * out_h or w != 2 * out_w:
        padded = np.full((n, 2 * out_h, 2 * out_w, c), -np.inf, dtype=x4.dtype)
        padded[:, :h, :w, :] = x4
    else:
        padded = x4
    windows = (
        padded.reshape(n, out_h, 2, out_w, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, out_h, out_w, 4, c)
    )
    indices = windows.argmax(axis=3)
    out = windows.max(axis=3)
    if squeezed:
        out = out[0]
    return out, PoolCache(indices.astype(np.int8), x4.shape, squeezed)


def maxpool_backward(cache: PoolCache, upstream) -> np.ndarray:
    """Scatter the upstream gradient to each window's argmax position."""
    n, h, w, c = cache.input_shape
    out_h, out_w = cache.indices.shape[1], cache.indices.shape[2]
    up = np.asarray(upstream)
    if cache.squeezed and up.ndim == 3:
        up = up[None]
    if up.shape != (n, out_h, out_w, c):
        raise DimensionError(
            f"pool backward: upstream shape {list(up.shape)} does not match "
            f"output {[n, out_h, out_w, c]}"
        )
    d_windows = np.zeros((n, out_h, out_w, 4, c), dtype=up.dtype)
    np.put_along_axis(
        d_windows,
        cache.indices.astype(np.intp)[:, :, :, None, :],
        up[:, :, :, None, :],
        axis=3,
    )
    d_padded = (
        d_windows.reshape(n, out_h, out_w, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, 2 * out_h, 2 * out_w, c)
    )
    d_input = np.ascontiguousarray(d_padded[:, :h, :w, :])
    return d_input[0] if cache.squeezed else d_input


@dataclass
class DenseLayer:
    """Fully connected weights: (n_in, n_out) matrix plus bias."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, n_in: int, n_out: int, rng):
        return cls(
            weights=xavier_init((n_in, n_out), rng),
            bias=np.zeros(n_out, dtype=np.float32),
        )


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    arr = np.asarray(x)
    squeezed = arr.ndim == 1
    x2 = arr[None] if squeezed else arr
    if x2.ndim != 2 or x2.shape[1] != layer.weights.shape[0]:
        raise DimensionError(
            f"dense: input shape {list(arr.shape)} does not match weights "
            f"{list(layer.weights.shape)}"
        )
    out = x2 @ layer.weights + layer.bias
    return out[0] if squeezed else out


def dense_backward(layer: DenseLayer, x, upstream):
    """Gradients of a dense layer: (d_input, d_weights, d_bias)."""
    arr = np.asarray(x)
    squeezed = arr.ndim == 1
    x2 = arr[None] if squeezed else arr
    up = np.asarray(upstream)
    up2 = up[None] if squeezed and up.ndim == 1 else up
    expected = (x2.shape[0], layer.weights.shape[1])
    if up2.shape != expected:
        raise DimensionError(
            f"dense backward: upstream shape {list(up.shape)} does not match "
            f"output {list(expected)}"
        )
    d_input = up2 @ layer.weights.T
    d_weights = x2.T @ up2
    d_bias = up2.sum(axis=0)
    return (d_input[0] if squeezed else d_input), d_weights, d_bias


def softmax(logits) -> np.ndarray:
    """Stable softmax along the last axis."""
    z = np.asarray(logits)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _check_target_rows(target: np.ndarray) -> None:
    sums = target.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > 1e-4:
        raise ValidationError(f"target rows must sum to 1, worst deviation {worst:.3g}")


def cross_entropy(p, target) -> float:
    """Mean cross-entropy -sum(target * log p) with log clamped at 1e-12.

    ``target`` rows must be probability distributions (sum to 1 within 1e-4).
    """
    p2 = np.atleast_2d(np.asarray(p))
    t2 = np.atleast_2d(np.asarray(target))
    if p2.shape != t2.shape:
        raise DimensionError(
            f"cross entropy: shapes {list(p2.shape)} and {list(t2.shape)} differ"
        )
    _check_target_rows(t2)
    losses = -(t2 * np.log(np.maximum(p2, LOG_CLAMP))).sum(axis=-1)
    return float(losses.mean())


def softmax_cross_entropy(logits, target):
    """Softmax followed by mean cross-entropy against ``target`` rows.

    Returns (loss, d_logits) with the analytic gradient
    (softmax(logits) - target) / n_rows.
    """
    z = np.asarray(logits)
    z2 = np.atleast_2d(z)
    t2 = np.atleast_2d(np.asarray(target))
    if z2.shape != t2.shape:
        raise DimensionError(
            f"softmax cross entropy: shapes {list(z2.shape)} and {list(t2.shape)} differ"
        )
    _check_target_rows(t2)
    p = softmax(z2)
    loss = float(-(t2 * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=-1).mean())
    d_logits = (p - t2) / z2.shape[0]
    return loss, d_logits.reshape(z.shape)


def dropout_forward(x, rate: float, training: bool, rng=None):
    """Inverted dropout. Returns (output, mask) where mask holds the kept
    positions as 1s. In inference mode (or rate 0) this is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    arr = np.asarray(x)
    if not training or rate == 0.0:
        return arr, np.ones_like(arr)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = (gen.random(arr.shape) >= rate).astype(arr.dtype)
    return arr * mask / (1.0 - rate), mask


def dropout_backward(mask: np.ndarray, rate: float, upstream) -> np.ndarray:
    """Route the upstream gradient through the kept positions."""
    up = np.asarray(upstream)
    if mask.shape != up.shape:
        raise DimensionError(
            f"dropout backward: mask {list(mask.shape)} vs upstream {list(up.shape)}"
        )
    if rate == 0.0:
        return up * mask
    return up * mask / (1.0 - rate)


@dataclass
class AdamState:
    """Per-parameter Adam optimizer state (first/second moments and step)."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_parameter(cls, param: np.ndarray, learning_rate: float = 1e-4):
        return cls(
            m=np.zeros_like(param),
            v=np.zeros_like(param),
            learning_rate=learning_rate,
        )


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the
    updated parameter values."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"adam: param {list(param.shape)}, grad {list(grad.shape)} and state "
            f"{list(state.m.shape)} must share one shape"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * np.square(grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
