"""Differentiable layer primitives, generic over 2 and 3 spatial dimensions.

Convolution is cross-correlation (no kernel flip), the convention of the
network families this kit rebuilds. Transposed convolution is implemented as
the exact adjoint of the forward convolution: both directions share one
scatter/gather pair, so the inner-product identity
``<conv(x, w), y> == <x, deconv(y, w)>`` holds to machine precision.

Weight layouts: a forward convolution stores weights as
(out_channels, in_channels, *kernel); a transposed convolution stores
(in_channels, out_channels, *kernel), i.e. the orientation of the forward
convolution it is the adjoint of. Shape rules per spatial dim:

    conv:   out = floor((in + 2*padding - kernel) / stride) + 1
    deconv: out = (in - 1) * stride - 2*padding + kernel
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, record_op


def _per_dim(value, dims: int, name: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * dims
    out = tuple(int(v) for v in value)
    if len(out) != dims:
        raise ShapeError(f"{name} must have {dims} entries, got {out}")
    return out


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def deconv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent - 1) * stride - 2 * padding + kernel


@dataclass
class ConvParams:
    """Weights and geometry of one (possibly transposed) convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: tuple[int, ...]
    weights: Tensor
    bias: Tensor | None = None
    transposed: bool = False

    def __post_init__(self):
        dims = len(self.kernel)
        self.kernel = _per_dim(self.kernel, dims, "kernel")
        self.stride = _per_dim(self.stride, dims, "stride")
        self.padding = _per_dim(self.padding, dims, "padding")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ShapeError("kernel and stride extents must be positive")
        if any(p < 0 for p in self.padding):
            raise ShapeError("padding must be non-negative")
        if self.transposed:
            expect = (self.in_channels, self.out_channels) + self.kernel
        else:
            expect = (self.out_channels, self.in_channels) + self.kernel
        if self.weights.shape != expect:
            raise ShapeError(f"weights shape {self.weights.shape} != expected {expect}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def spatial_dims(self) -> int:
        return len(self.kernel)

    @classmethod
    def create(cls, in_channels: int, out_channels: int, kernel, stride=1, padding=0,
               spatial_dims: int = 2, transposed: bool = False, bias: bool = True,
               dtype=np.float32) -> "ConvParams":
        """Zero-initialized parameters (call an initializer before training)."""
        k = _per_dim(kernel, spatial_dims, "kernel")
        if transposed:
            wshape = (in_channels, out_channels) + k
        else:
            wshape = (out_channels, in_channels) + k
        w = Tensor(np.zeros(wshape, dtype=dtype), requires_grad=True)
        b = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        return cls(in_channels, out_channels, k,
                   _per_dim(stride, spatial_dims, "stride"),
                   _per_dim(padding, spatial_dims, "padding"),
                   w, b, transposed)


@dataclass
class BatchNormState:
    """Per-channel affine batch normalization with running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if not (0.0 < self.momentum < 1.0):
            raise ValueError("momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance entries must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def create(cls, channels: int, momentum: float = 0.9, epsilon: float = 1e-5,
               dtype=np.float32) -> "BatchNormState":
        return cls(gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype),
                   momentum=momentum, epsilon=epsilon)


# ---------------------------------------------------------------------------
# dense numpy kernels (shared by forward and backward passes)

def _windows(x: np.ndarray, kernel, stride, padding) -> np.ndarray:
    """Strided view of all kernel-sized patches: (N, C, *out, *kernel)."""
    dims = x.ndim - 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + dims)))
    sel = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return win[sel]


def _conv_nd(x: np.ndarray, w: np.ndarray, stride, padding) -> np.ndarray:
    dims = x.ndim - 2
    win = _windows(x, w.shape[2:], stride, padding)
    axes_win = (1,) + tuple(range(2 + dims, 2 + 2 * dims))
    axes_w = (1,) + tuple(range(2, 2 + dims))
    y = np.tensordot(win, w, axes=(axes_win, axes_w))  # (N, *out, C_out)
    return np.ascontiguousarray(np.moveaxis(y, -1, 1))


def _conv_nd_grad_w(x: np.ndarray, gy: np.ndarray, kernel, stride, padding) -> np.ndarray:
    dims = x.ndim - 2
    win = _windows(x, kernel, stride, padding)
    axes = (0,) + tuple(range(2, 2 + dims))
    return np.tensordot(gy, win, axes=(axes, axes))  # (C_out, C_in, *kernel)


def _conv_nd_input_adjoint(gy: np.ndarray, w: np.ndarray, stride, padding,
                           in_spatial) -> np.ndarray:
    """Exact adjoint of _conv_nd with respect to its input.

    Scatters gy back through the kernel taps; also serves as the transposed
    convolution forward pass (in_spatial is then the upsampled output size).
    """
    dims = gy.ndim - 2
    kernel = w.shape[2:]
    n, c_in = gy.shape[0], w.shape[1]
    padded = tuple(s + 2 * p for s, p in zip(in_spatial, padding))
    out_sp = gy.shape[2:]
    # (N, *out, C_in, *kernel); one GEMM, then strided scatter per kernel tap.
    t = np.tensordot(gy, w, axes=((1,), (0,)))
    xp = np.zeros((n, c_in) + padded, dtype=gy.dtype)
    for offset in np.ndindex(*kernel):
        contrib = t[(slice(None),) * (1 + dims) + (slice(None),) + offset]
        contrib = np.moveaxis(contrib, -1, 1)  # (N, C_in, *out)
        sel = tuple(slice(o, o + s * (e - 1) + 1, s)
                    for o, s, e in zip(offset, stride, out_sp))
        xp[(slice(None), slice(None)) + sel] += contrib
    trim = tuple(slice(p, p + s) for p, s in zip(padding, in_spatial))
    return np.ascontiguousarray(xp[(slice(None), slice(None)) + trim])


# ---------------------------------------------------------------------------
# differentiable operations

def _check_input(x: Tensor, p: ConvParams, opname: str) -> int:
    dims = p.spatial_dims
    if x.data.ndim != dims + 2:
        raise ShapeError(f"{opname}: input must be (N, C, {dims} spatial dims), "
                         f"got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"{opname}: input has {x.shape[1]} channels, "
                         f"params declare {p.in_channels}")
    return dims


def conv_forward(x: Tensor, p: ConvParams, name: str = "conv") -> Tensor:
    """Cross-correlation with bias; gradients for input, weights, and bias."""
    if p.transposed:
        raise ShapeError("conv_forward called with transposed parameters")
    _check_input(x, p, "conv_forward")
    out_sp = tuple(conv_output_extent(e, k, s, pd) for e, k, s, pd
                   in zip(x.shape[2:], p.kernel, p.stride, p.padding))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"conv_forward: non-positive output extents {out_sp} "
                         f"for input {x.shape[2:]}")
    y = _conv_nd(x.data, p.weights.data, p.stride, p.padding)
    if p.bias is not None:
        y += p.bias.data.reshape((1, -1) + (1,) * p.spatial_dims)
    out = Tensor(y)
    x_data, in_sp = x.data, x.shape[2:]
    need_gx = x.requires_grad

    def backward_fn(gy):
        gx = (_conv_nd_input_adjoint(gy, p.weights.data, p.stride, p.padding, in_sp)
              if need_gx else None)
        gw = _conv_nd_grad_w(x_data, gy, p.kernel, p.stride, p.padding)
        gb = gy.sum(axis=(0,) + tuple(range(2, gy.ndim))) if p.bias is not None else None
        return (gx, gw, gb)

    inputs = (x, p.weights) + ((p.bias,) if p.bias is not None else ())
    return record_op("conv", inputs, out,
                     lambda gy: backward_fn(gy)[:len(inputs)], name)


def deconv_forward(x: Tensor, p: ConvParams, name: str = "deconv") -> Tensor:
    """Transposed convolution: the adjoint of conv_forward plus a bias."""
    if not p.transposed:
        raise ShapeError("deconv_forward needs transposed parameters")
    _check_input(x, p, "deconv_forward")
    out_sp = tuple(deconv_output_extent(e, k, s, pd) for e, k, s, pd
                   in zip(x.shape[2:], p.kernel, p.stride, p.padding))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"deconv_forward: non-positive output extents {out_sp}")
    y = _conv_nd_input_adjoint(x.data, p.weights.data, p.stride, p.padding, out_sp)
    if p.bias is not None:
        y += p.bias.data.reshape((1, -1) + (1,) * p.spatial_dims)
    out = Tensor(y)
    x_data = x.data
    need_gx = x.requires_grad

    def backward_fn(gy):
        gx = _conv_nd(gy, p.weights.data, p.stride, p.padding) if need_gx else None
        gw = _conv_nd_grad_w(gy, x_data, p.kernel, p.stride, p.padding)
        gb = gy.sum(axis=(0,) + tuple(range(2, gy.ndim))) if p.bias is not None else None
        return (gx, gw, gb)

    inputs = (x, p.weights) + ((p.bias,) if p.bias is not None else ())
    return record_op("deconv", inputs, out,
                     lambda gy: backward_fn(gy)[:len(inputs)], name)


def maxpool(x: Tensor, window, stride=None, name: str = "maxpool") -> Tensor:
    """Per-window maximum; gradient routes to the first max in scan order."""
    dims = x.data.ndim - 2
    window = _per_dim(window, dims, "window")
    stride = window if stride is None else _per_dim(stride, dims, "stride")
    if any(e < w for e, w in zip(x.shape[2:], window)):
        raise ShapeError(f"maxpool window {window} larger than input {x.shape[2:]}")
    win = _windows(x.data, window, stride, (0,) * dims)
    out_sp = win.shape[2:2 + dims]
    flat = win.reshape(win.shape[:2 + dims] + (-1,))
    arg = flat.argmax(axis=-1)
    out = Tensor(np.ascontiguousarray(np.take_along_axis(
        flat, arg[..., None], axis=-1)[..., 0]))

    x_shape = x.shape

    def backward_fn(gy):
        gx = np.zeros(x_shape, dtype=gy.dtype)
        idx = np.indices(arg.shape)
        offsets = np.unravel_index(arg, window)
        coords = [idx[0], idx[1]]
        for d in range(dims):
            coords.append(idx[2 + d] * stride[d] + offsets[d])
        np.add.at(gx, tuple(coords), gy)
        return (gx,)

    return record_op("maxpool", (x,), out, backward_fn, name)


def batch_norm(x: Tensor, s: BatchNormState, name: str = "batch_norm") -> Tensor:
    """Normalize per channel; batch statistics in train mode, running in infer."""
    if x.data.ndim < 2 or x.shape[1] != s.channels:
        raise ShapeError(f"batch_norm: input shape {x.shape} does not carry "
                         f"{s.channels} channels")
    axes = (0,) + tuple(range(2, x.data.ndim))
    shape = (1, -1) + (1,) * (x.data.ndim - 2)
    gamma, beta = s.gamma.data.reshape(shape), s.beta.data.reshape(shape)
    m = x.size // s.channels

    if s.mode == "train":
        if m < 2:
            raise ShapeError("batch_norm train mode needs batch*spatial >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        s.running_mean[...] = s.momentum * s.running_mean + (1 - s.momentum) * mu
        s.running_var[...] = s.momentum * s.running_var + (1 - s.momentum) * var
        inv = 1.0 / np.sqrt(var + s.epsilon)
        xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
        out = Tensor(gamma * xhat + beta)

        def backward_fn(gy):
            dxhat = gy * gamma
            sum_dxhat = dxhat.sum(axis=axes).reshape(shape)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(shape)
            gx = (inv.reshape(shape) / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
            ggamma = (gy * xhat).sum(axis=axes)
            gbeta = gy.sum(axis=axes)
            return (gx, ggamma, gbeta)
    elif s.mode == "infer":
        inv = (1.0 / np.sqrt(s.running_var + s.epsilon)).reshape(shape)
        xhat = (x.data - s.running_mean.reshape(shape)) * inv
        out = Tensor(gamma * xhat + beta)

        def backward_fn(gy):
            return (gy * gamma * inv, (gy * xhat).sum(axis=axes), gy.sum(axis=axes))
    else:
        raise ValueError(f"unknown batch norm mode {s.mode!r}")

    return record_op("batch_norm", (x, s.gamma, s.beta), out, backward_fn, name)


def relu(x: Tensor, name: str = "relu") -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient 0 at 0

    def backward_fn(gy):
        return (gy * mask,)

    return record_op("relu", (x,), out, backward_fn, name)


def concat_channels(xs: Sequence[Tensor], name: str = "concat") -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    base = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} vs {t.shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    sizes = [t.shape[1] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(gy):
        return tuple(np.ascontiguousarray(g) for g in np.split(gy, splits, axis=1))

    return record_op("concat", tuple(xs), out, backward_fn, name)


def add_elementwise(a: Tensor, b: Tensor, name: str = "add") -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add_elementwise: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return record_op("add", (a, b), out, lambda gy: (gy, gy.copy()), name)


def mul_elementwise(a: Tensor, b: Tensor, name: str = "mul") -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul_elementwise: shapes {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    return record_op("mul", (a, b), out,
                     lambda gy: (gy * b.data, gy * a.data), name)


def scale(x: Tensor, c: float, name: str = "scale") -> Tensor:
    out = Tensor(x.data * x.data.dtype.type(c))
    return record_op("scale", (x,), out, lambda gy: (gy * c,), name)


def tsum(x: Tensor, name: str = "sum") -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=x.data.dtype)))
    shape = x.shape

    def backward_fn(gy):
        return (np.broadcast_to(gy, shape).astype(gy.dtype),)

    return record_op("sum", (x,), out, backward_fn, name)


def mean_tensors(xs: Sequence[Tensor], name: str = "average") -> Tensor:
    """Elementwise mean of same-shape tensors, accumulated in list order."""
    xs = list(xs)
    if not xs:
        raise ShapeError("mean_tensors needs at least one tensor")
    for t in xs[1:]:
        if t.shape != xs[0].shape:
            raise ShapeError("mean_tensors: all shapes must match")
    acc = xs[0].data.copy()
    for t in xs[1:]:
        acc += t.data
    acc /= len(xs)
    out = Tensor(acc)
    n = len(xs)

    def backward_fn(gy):
        share = gy / n
        return tuple(share.copy() for _ in range(n))

    return record_op("average", tuple(xs), out, backward_fn, name)


def softmax_channels(x: Tensor, name: str = "softmax") -> Tensor:
    """Per-position distribution over the channel axis."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def backward_fn(gy):
        dot = (gy * p).sum(axis=1, keepdims=True)
        return (p * (gy - dot),)

    return record_op("softmax", (x,), out, backward_fn, name)
