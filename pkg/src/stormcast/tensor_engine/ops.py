"""Differentiable operations over :class:`Tensor`.

Convolution follows the cross-correlation convention (no kernel flip).
``conv_transpose2d`` is the exact adjoint of ``conv2d`` for the same kernel:
``<conv2d(x, k), y> == <x, conv_transpose2d(y, k)>``.

The heavy lifting is an im2col reshape followed by one GEMM per call; the
backward pass re-derives the column matrix from the saved padded input
instead of caching it, trading a little recompute for bounded memory.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .tensor import Tensor, check_finite, record

# ---------------------------------------------------------------------------
# helpers


def _result(data: np.ndarray, op_name: str) -> Tensor:
    check_finite(data, op_name)
    return Tensor(data, dtype=data.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_shapes(a: Tensor, b: Tensor, op_name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op_name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = _result(a.data + b.data, "add")
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    out = _result(a.data - b.data, "sub")
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = _result(a.data * b.data, "mul")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    out = _result(a.data * factor, "scale")
    return record(out, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, "sigmoid")
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, "tanh")
    return record(out, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), "relu")
    return record(out, (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data
    out = _result(np.where(x > 0, x, slope * x), "leaky_relu")
    return record(out, (a,), lambda g: (g * np.where(x > 0, 1.0, slope),))


def abs_(a: Tensor) -> Tensor:
    out = _result(np.abs(a.data), "abs")
    return record(out, (a,), lambda g: (g * np.sign(a.data),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    x = a.data
    out = _result(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), "softplus")

    def backward_fn(g):
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return (g * y,)

    return record(out, (a,), backward_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "scale": scale,
}


def elementwise(op_kind: str, *args) -> Tensor:
    """Dispatch by name; covers add, sub, mul, sigmoid, tanh, relu, leaky_relu, scale."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op_kind}'") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor) -> Tensor:
    out = _result(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum")
    return record(out, (a,), lambda g: (np.full_like(a.data, g.reshape(())),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result(np.asarray(a.data.mean(), dtype=a.data.dtype), "mean")
    return record(out, (a,), lambda g: (np.full_like(a.data, g.reshape(()) / n),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: need at least one tensor")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice along one axis; the backward rule scatters into zeros."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _result(a.data[index].copy(), "slice_axis")

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution


def _as_nchw(x: Tensor, op_name: str):
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"{op_name}: expected a 3-D (C,H,W) or 4-D (N,C,H,W) input, got {x.shape}")


def _columns(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """im2col: (N,C,Hp,Wp) -> (N*Ho*Wo, C*kh*kw)."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _gemm_conv(xp: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    co, ci, kh, kw = kernel.shape
    n = xp.shape[0]
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    cols = _columns(xp, kh, kw, stride)
    out = cols @ kernel.reshape(co, ci * kh * kw).T
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)


def _gemm_conv_grad_kernel(xp: np.ndarray, g: np.ndarray, stride: int, kshape: tuple) -> np.ndarray:
    co, ci, kh, kw = kshape
    cols = _columns(xp, kh, kw, stride)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    return (cols.T @ gmat).T.reshape(co, ci, kh, kw)


def _scatter_through_kernel(g: np.ndarray, kernel: np.ndarray, stride: int, out_shape: tuple) -> np.ndarray:
    """Adjoint of `_gemm_conv`: distribute g (N,Co,Ho,Wo) back onto the padded grid."""
    co, ci, kh, kw = kernel.shape
    n, _, ho, wo = g.shape
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
    gcols = (gmat @ kernel.reshape(co, ci * kh * kw)).reshape(n, ho, wo, ci, kh, kw)
    gx = np.zeros(out_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return gx


def _pad_hw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation; kernel (C_out, C_in, kH, kW), odd kH and kW.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1 per axis.
    """
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D, got {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ContractError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ContractError("conv2d: stride must be a positive integer")
    if padding < 0:
        raise ContractError("conv2d: padding must be non-negative")
    xd, squeeze = _as_nchw(x, "conv2d")
    if xd.shape[1] != ci:
        raise DimensionError(f"conv2d: input has {xd.shape[1]} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    xp = _pad_hw(xd, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ContractError("conv2d: padded input is smaller than the kernel")

    out_data = _gemm_conv(xp, kernel.data, stride)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]
    out = _result(out_data, "conv2d")

    def backward_fn(g):
        g4 = g[None] if squeeze else g
        gx = gk = gb = None
        if x.requires_grad:
            gxp = _scatter_through_kernel(g4, kernel.data, stride, xp.shape)
            gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = _gemm_conv_grad_kernel(xp, g4, stride, kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    if bias is None:
        return record(out, inputs, lambda g: backward_fn(g)[:2])
    return record(out, inputs, backward_fn)


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` for the same kernel layout (C_out, C_in, kH, kW).

    Maps a C_out-channel input to a C_in-channel output of spatial size
    (H - 1)*stride - 2*padding + kH per axis. Even kernel sizes are allowed
    here (kH - 2*padding = stride gives exact stride-fold upsampling, which
    no odd kernel can achieve).
    """
    if kernel.ndim != 4:
        raise DimensionError(f"conv_transpose2d: kernel must be 4-D, got {kernel.shape}")
    co, ci, kh, kw = kernel.shape
    if stride < 1:
        raise ContractError("conv_transpose2d: stride must be a positive integer")
    if padding < 0:
        raise ContractError("conv_transpose2d: padding must be non-negative")
    xd, squeeze = _as_nchw(x, "conv_transpose2d")
    if xd.shape[1] != co:
        raise DimensionError(
            f"conv_transpose2d: input has {xd.shape[1]} channels, kernel expects {co}"
        )
    if bias is not None and bias.shape != (ci,):
        raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({ci},)")
    n, _, h, w = xd.shape
    hp = (h - 1) * stride + kh
    wp = (w - 1) * stride + kw
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise ContractError("conv_transpose2d: output size would be empty")

    out_pad = _scatter_through_kernel(xd, kernel.data, stride, (n, ci, hp, wp))
    out_data = out_pad if padding == 0 else out_pad[:, :, padding:-padding, padding:-padding]
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    if squeeze:
        out_data = out_data[0]
    out = _result(out_data, "conv_transpose2d")

    def backward_fn(g):
        g4 = g[None] if squeeze else g
        gp = _pad_hw(g4, padding)
        gx = gk = gb = None
        if x.requires_grad:
            gx = _gemm_conv(gp, kernel.data, stride)
            if squeeze:
                gx = gx[0]
        if kernel.requires_grad:
            gk = _gemm_conv_grad_kernel(gp, xd, stride, kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        return gx, gk, gb

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    if bias is None:
        return record(out, inputs, lambda g: backward_fn(g)[:2])
    return record(out, inputs, backward_fn)
