"""
tensorcore.py - Dense tensor helpers and numerical kernels

A tensor is a read-only, C-contiguous numpy array of float32 or float64 in
row-major layout. Images use the channels-first convention [C, H, W].

Every kernel has a batched form (leading N axis, used by the trainer) and a
single-sample form matching the layer semantics used by the model graph.
Convolution is cross-correlation (no kernel flip). Max-pool ties resolve to
the lowest flat index.
"""

import logging
from typing import Literal, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import GeometryError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

PoolKind = Literal["max", "average"]
ArrayLike = Union[np.ndarray, Sequence, float]


def tensor(
    data: ArrayLike,
    dtype: Union[str, np.dtype, type] = np.float32,
    shape: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Build a validated, immutable tensor

    Args:
        data: Nested sequence, array or flat sequence of values
        dtype: "f32", "f64" or a numpy float dtype
        shape: Optional shape; when given, data is read as flat row-major values

    Returns:
        Read-only C-contiguous array

    Raises:
        ShapeError: product(shape) disagrees with the number of values
        NonFiniteError: any value is NaN or Inf
    """
    dt = DTYPES[dtype] if isinstance(dtype, str) else np.dtype(dtype)
    if dt not in DTYPES.values():
        raise ShapeError(f"Unsupported dtype {dt}; expected float32 or float64")

    arr = np.array(data, dtype=dt, copy=True, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"Shape extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(
                f"Shape {shape} needs {int(np.prod(shape))} values, got {arr.size}"
            )
        arr = arr.reshape(shape)

    check_finite(arr)
    arr.flags.writeable = False
    return arr


def freeze(arr: np.ndarray) -> np.ndarray:
    """Read-only C-contiguous copy of arr"""
    arr = np.array(arr, copy=True, order="C")
    arr.flags.writeable = False
    return arr


def check_finite(arr: np.ndarray, node_id: Optional[str] = None) -> None:
    """Raise NonFiniteError if arr holds NaN or Inf"""
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{bad} non-finite value(s)", node_id=node_id)


def _out_extent(size: int, window: int, stride: int, padding: int) -> int:
    if stride < 1:
        raise GeometryError(f"Stride must be positive, got {stride}")
    if padding < 0:
        raise GeometryError(f"Padding must be non-negative, got {padding}")
    padded = size + 2 * padding
    if window < 1 or window > padded:
        raise GeometryError(
            f"Window {window} does not fit padded extent {padded}"
        )
    return (padded - window) // stride + 1


def conv_output_shape(
    input_shape: Sequence[int], kernel_shape: Sequence[int], stride: int, padding: int
) -> tuple[int, int, int]:
    """Static shape of conv2d for a [C,H,W] input and [O,C,kH,kW] kernel"""
    c, h, w = input_shape
    o, kc, kh, kw = kernel_shape
    if kc != c:
        raise ShapeError(f"Kernel expects {kc} input channels, input has {c}")
    return (o, _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding))


def pool_output_shape(
    input_shape: Sequence[int], window: int, stride: int
) -> tuple[int, int, int]:
    """Static shape of a pooling layer for a [C,H,W] input"""
    c, h, w = input_shape
    return (c, _out_extent(h, window, stride, 0), _out_extent(w, window, stride, 0))


def window_view(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """[N,C,H,W] -> strided view [N,C,H',W',kh,kw]"""
    view = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


# Convolution


def conv2d_batch(
    x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """Batched cross-correlation: [N,C,H,W] -> [N,O,H',W']"""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects [N,C,H,W] input and [O,C,kH,kW] kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(
            f"Bias shape {bias.shape} does not match {kernel.shape[0]} output channels"
        )
    conv_output_shape(x.shape[1:], kernel.shape, stride, padding)

    kh, kw = kernel.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = window_view(xp, kh, kw, stride)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_input(
    grad_out: np.ndarray,
    kernel: np.ndarray,
    input_shape: Sequence[int],
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Transpose of conv2d w.r.t. its input: [N,O,H',W'] -> [N,C,H,W]"""
    n = grad_out.shape[0]
    c, h, w = input_shape
    kh, kw = kernel.shape[2:]
    ho, wo = grad_out.shape[2:]
    dtype = np.result_type(grad_out, kernel)
    gp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(grad_out, kernel[:, :, i, j], axes=([1], [0]))
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            gp[:, :, rows, cols] += contrib.transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gp[:, :, padding : padding + h, padding : padding + w])


def conv2d_backward_params(
    grad_out: np.ndarray,
    x: np.ndarray,
    kernel_shape: Sequence[int],
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. kernel and bias, summed over the batch"""
    kh, kw = kernel_shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = window_view(xp, kh, kw, stride)
    d_kernel = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    d_bias = grad_out.sum(axis=(0, 2, 3))
    return d_kernel, d_bias


def conv2d_forward(
    input: np.ndarray,
    kernel: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-D cross-correlation of a [C,H,W] input with a [O,C,kH,kW] kernel

    Output extents are floor((H + 2*padding - kH) / stride) + 1 (same for W).

    Raises:
        ShapeError: channel or bias mismatch
        GeometryError: the kernel does not fit the padded input
    """
    if input.ndim != 3:
        raise ShapeError(f"conv2d expects a [C,H,W] input, got shape {input.shape}")
    out = conv2d_batch(input[None], kernel, bias, stride, padding)[0]
    check_finite(out)
    return freeze(out)


# Pooling


def pool_batch(
    x: np.ndarray, kind: PoolKind, window: int, stride: int
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Batched pooling: [N,C,H,W] -> ([N,C,H',W'], argmax plane indices or None)"""
    if x.ndim != 4:
        raise ShapeError(f"pooling expects [N,C,H,W], got {x.shape}")
    _, _, ho, wo = (x.shape[0],) + pool_output_shape(x.shape[1:], window, stride)
    win = window_view(x, window, window, stride)
    flat = win.reshape(win.shape[:4] + (window * window,))

    if kind == "average":
        return np.ascontiguousarray(flat.mean(axis=-1)), None
    if kind != "max":
        raise GeometryError(f"Unknown pooling kind '{kind}'")

    local = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window
    cols = np.arange(wo)[None, :] * stride + local % window
    argmax = rows * x.shape[3] + cols
    return np.ascontiguousarray(out), argmax


def pool_backward(
    grad_out: np.ndarray,
    input_shape: Sequence[int],
    kind: PoolKind,
    window: int,
    stride: int,
    argmax: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Route [N,C,H',W'] gradients back to [N,C,H,W]

    Max pooling sends each gradient to its recorded argmax; average pooling
    spreads it uniformly over the window.
    """
    n = grad_out.shape[0]
    c, h, w = input_shape
    grad_in = np.zeros((n, c, h * w), dtype=grad_out.dtype)

    if kind == "max":
        if argmax is None:
            raise ShapeError("Max-pool backward needs the argmax record")
        flat_idx = argmax.reshape(n, c, -1)
        nn = np.arange(n)[:, None, None]
        cc = np.arange(c)[None, :, None]
        np.add.at(grad_in, (nn, cc, flat_idx), grad_out.reshape(n, c, -1))
        return grad_in.reshape(n, c, h, w)

    grad_in = grad_in.reshape(n, c, h, w)
    ho, wo = grad_out.shape[2:]
    share = grad_out / (window * window)
    for i in range(window):
        for j in range(window):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            grad_in[:, :, rows, cols] += share
    return grad_in


def pool_forward(
    input: np.ndarray, kind: PoolKind, window: int, stride: int
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Max or average pooling of a [C,H,W] input

    Returns:
        (pooled [C,H',W'], argmax record or None). The argmax record holds,
        for each output element, the flat index into its channel's H*W plane
        of the selected input element (first occurrence on ties).
    """
    if input.ndim != 3:
        raise ShapeError(f"pooling expects a [C,H,W] input, got {input.shape}")
    out, argmax = pool_batch(input[None], kind, window, stride)
    return freeze(out[0]), None if argmax is None else freeze(argmax[0])


def global_avg_pool_batch(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C]"""
    return x.mean(axis=(2, 3))


# Fully connected


def dense_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """[N, ...] flattened row-major -> [N, m]"""
    flat = x.reshape(x.shape[0], -1)
    if weight.ndim != 2 or flat.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"dense weight {weight.shape} does not accept {flat.shape[1]} inputs"
        )
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"Bias shape {bias.shape} does not match weight {weight.shape}")
    return flat @ weight.T + bias


def dense_forward(input: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """weight @ input + bias for a vector input (other shapes are flattened)"""
    out = dense_batch(input[None], weight, bias)[0]
    check_finite(out)
    return freeze(out)


# Elementwise and normalization


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector to broadcast against [N,C,...] data"""
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def batchnorm_scale_shift(
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    epsilon: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel affine form of inference-mode batch-norm: y = scale*x + shift"""
    scale = gamma / np.sqrt(var + epsilon)
    return scale, beta - mean * scale


def batchnorm_batch(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    epsilon: float,
) -> np.ndarray:
    """Inference-mode batch-norm over axis 1 of [N,C,...]"""
    scale, shift = batchnorm_scale_shift(gamma, beta, mean, var, epsilon)
    return x * channel_view(scale, x.ndim) + channel_view(shift, x.ndim)
