"""Differentiable primitives needed to build and train the denoising network."""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .tensor import Tensor, current_tape, get_default_dtype

logger = logging.getLogger(__name__)

NORM_EPS = 1e-5

TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    """Return value as a Tensor, wrapping arrays and scalars as constants."""
    if isinstance(value, Tensor):
        return value
    return Tensor.wrap(np.asarray(value, dtype=get_default_dtype()))


def _record(op: str, array: np.ndarray, inputs: Tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result and record it on the active tape if any input needs a gradient."""
    output = Tensor.wrap(array)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, output, inputs, vjp)
    return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), vjp)


def absolute(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * np.sign(x.data),)

    return _record("abs", np.abs(x.data), (x,), vjp)


def square(x: Tensor) -> Tensor:
    def vjp(g):
        return (2.0 * g * x.data,)

    return _record("square", x.data * x.data, (x,), vjp)


def silu(x: Tensor) -> Tensor:
    """Sigmoid linear unit x * sigmoid(x)."""
    s = expit(x.data)

    def vjp(g):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return _record("silu", x.data * s, (x,), vjp)


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def vjp(g):
        return (g.reshape(x.shape),)

    return _record("reshape", x.data.reshape(shape), (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _record("transpose", x.data.transpose(axes), (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Take x[..., start:stop, ...] along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _record("slice", x.data[index], (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply x @ weight + bias over the last axis."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# ---------------------------------------------------------------------------
# Convolution and resampling
# ---------------------------------------------------------------------------

def _gather_windows(padded: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=padded.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj] = padded[:, :, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride]
    return cols


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0
) -> Tensor:
    """
    2D cross-correlation of an NCHW input with an OCkk kernel.

    Args:
        x: Input of shape (N, C, H, W)
        kernel: Weights of shape (O, C, k, k)
        bias: Optional per-output-channel bias of shape (O,)
        stride: Step between windows
        padding: Zero padding added on every side

    Returns:
        Tensor of shape (N, O, H', W') with H' = (H + 2p - k) / stride + 1
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OCkk kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    out_c, in_c, k, k2 = kernel.shape
    if in_c != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {in_c}")
    if k != k2:
        raise ValueError(f"conv2d needs a square kernel, got {k}x{k2}")

    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {k} with padding {padding}")

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _gather_windows(padded, k, stride, out_h, out_w)
    out = np.tensordot(cols, kernel.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def vjp(g):
        g_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        g_cols = np.tensordot(g, kernel.data, axes=([1], [0]))
        g_padded = np.zeros_like(padded)
        for di in range(k):
            for dj in range(k):
                g_padded[:, :, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride] += \
                    g_cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        g_x = g_padded[:, :, padding:padding + h, padding:padding + w]
        grads = [g_x, g_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, inputs, vjp)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of the two trailing axes."""
    n, c, h, w = x.shape

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample", x.data.repeat(2, axis=2).repeat(2, axis=3), (x,), vjp)


# ---------------------------------------------------------------------------
# Normalization and attention
# ---------------------------------------------------------------------------

def _standardize(x: Tensor, rows: np.ndarray, eps: float, op: str) -> Tensor:
    """Standardize each row of a (R, M) view of x and record the result in x's shape."""
    mu = rows.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(rows.var(axis=-1, keepdims=True) + eps)
    normalized = (rows - mu) * inv_std

    def vjp(g):
        gr = g.reshape(rows.shape)
        gx = inv_std * (
            gr
            - gr.mean(axis=-1, keepdims=True)
            - normalized * (gr * normalized).mean(axis=-1, keepdims=True)
        )
        return (gx.reshape(x.shape),)

    return _record(op, normalized.reshape(x.shape), (x,), vjp)


def group_norm(
    x: Tensor,
    groups: int,
    scale: Optional[Tensor] = None,
    shift: Optional[Tensor] = None,
    eps: float = NORM_EPS
) -> Tensor:
    """
    Group normalization of an NCHW tensor with optional per-channel affine.

    Args:
        x: Input of shape (N, C, H, W)
        groups: Number of channel groups; must divide C
        scale: Per-channel scale of shape (C,)
        shift: Per-channel shift of shape (C,)
        eps: Variance floor

    Returns:
        Normalized tensor with the input's shape
    """
    if x.ndim != 4:
        raise ValueError(f"group_norm expects NCHW input, got shape {x.shape}")
    n, c = x.shape[:2]
    if groups < 1 or c % groups != 0:
        raise ValueError(f"group_norm: {groups} groups do not divide {c} channels")
    if eps <= 0:
        raise ValueError(f"group_norm eps must be positive, got {eps}")

    out = _standardize(x, x.data.reshape(n * groups, -1), eps, "group_norm")
    if scale is not None:
        out = mul(out, reshape(scale, (1, c, 1, 1)))
    if shift is not None:
        out = add(out, reshape(shift, (1, c, 1, 1)))
    return out


def layer_norm(
    x: Tensor,
    scale: Optional[Tensor] = None,
    shift: Optional[Tensor] = None,
    eps: float = NORM_EPS
) -> Tensor:
    """Normalize over the last axis with optional elementwise affine."""
    out = _standardize(x, x.data.reshape(-1, x.shape[-1]), eps, "layer_norm")
    if scale is not None:
        out = mul(out, scale)
    if shift is not None:
        out = add(out, shift)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax_rows received non-finite input")

    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = shifted / shifted.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), vjp)


def split_channels(x: Tensor, parts: int, axis: int = 1) -> List[Tensor]:
    """Split x into equal parts along an axis."""
    extent = x.shape[axis]
    if extent % parts != 0:
        raise ValueError(f"Cannot split extent {extent} into {parts} equal parts")
    step = extent // parts
    return [slice_axis(x, i * step, (i + 1) * step, axis) for i in range(parts)]
