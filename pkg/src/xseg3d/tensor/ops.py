"""Differentiable primitives.

Every function accepts :class:`Tensor` inputs (plain numbers and arrays are
promoted to constants), computes its result with numpy or the convolution
kernels, and records a backward closure on the active tape.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import kernels
from .tensor import Tensor, active_tape

_AXES = ("D", "H", "W")


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _emit(op, inputs, out, backward, **attrs) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(op, inputs, out, backward, **attrs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ShapeError(f"expected an int or a triple, got {v}")
    return v


def _pair_operands(a, b):
    if not isinstance(a, Tensor):
        a = _t(a, b)
    if not isinstance(b, Tensor):
        b = _t(b, a)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# --------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair_operands(a, b)
    out = a.data + b.data

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit("add", (a, b), out, back)


def sub(a, b) -> Tensor:
    a, b = _pair_operands(a, b)
    out = a.data - b.data

    def back(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _emit("sub", (a, b), out, back)


def neg(a) -> Tensor:
    a = _t(a)
    return _emit("neg", (a,), -a.data, lambda g, needs: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair_operands(a, b)
    out = a.data * b.data

    def back(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _emit("mul", (a, b), out, back)


def div(a, b) -> Tensor:
    a, b = _pair_operands(a, b)
    out = a.data / b.data

    def back(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _emit("div", (a, b), out, back)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def sigmoid(x) -> Tensor:
    x = _t(x)
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g, needs: (g * out * (1 - out),))


def relu(x) -> Tensor:
    x = _t(x)
    out = np.where(x.data > 0, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", (x,), out, lambda g, needs: (g * (x.data > 0),))


def _channel_view(alpha: np.ndarray, ndim: int) -> np.ndarray:
    return alpha.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, alpha) -> Tensor:
    """``x`` where positive, ``alpha * x`` elsewhere; ``alpha`` per channel (axis 1) or shared."""
    x = _t(x)
    alpha = _t(alpha, x)
    if alpha.ndim != 1 or alpha.shape[0] not in (1, x.shape[1] if x.ndim > 1 else 1):
        raise ShapeError(
            f"prelu alpha of shape {alpha.shape} incompatible with {x.shape[1] if x.ndim > 1 else 1} channels",
            axis="C",
        )
    a = _channel_view(alpha.data, x.ndim) if x.ndim > 1 else alpha.data
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def back(g, needs):
        gx = g * np.where(pos, 1, a) if needs[0] else None
        ga = None
        if needs[1]:
            contrib = np.where(pos, 0, g * x.data)
            axes = tuple(i for i in range(x.ndim) if i != 1) if alpha.shape[0] > 1 else None
            ga = contrib.sum(axis=axes).reshape(alpha.shape)
        return gx, ga

    return _emit("prelu", (x, alpha), out, back)


def dropout(x, p: float, training: bool, rng) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _t(x)
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    scale = (keep / (1 - p)).astype(x.dtype)
    out = x.data * scale
    return _emit("dropout", (x,), out, lambda g, needs: (g * scale,), p=p)


# ---------------------------------------------------------------------- structural


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_t(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ShapeError("concat inputs differ in rank")
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and m != n:
                raise ShapeError(f"concat inputs differ on axis {ax}: {m} vs {n}", axis=ax)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, back, axis=axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _t(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, back, axis=axis)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _emit("mean", (x,), out, back, axis=axis)


# -------------------------------------------------------------------- convolution


def _check_conv(x: Tensor, weight: Tensor, in_axis: int, name: str):
    if x.ndim != 5:
        raise ShapeError(f"{name} expects N C D H W input, got rank {x.ndim}")
    if weight.ndim != 5:
        raise ShapeError(f"{name} expects a rank-5 weight, got rank {weight.ndim}")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels, weight expects {weight.shape[in_axis]}",
            axis="C",
        )


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation; ``weight`` is (C_out, C_in, kD, kH, kW)."""
    x, weight = _t(x), _t(weight)
    stride, padding = _triple(stride), _triple(padding)
    _check_conv(x, weight, 1, "conv3d")
    k = weight.shape[2:]
    for ax in range(3):
        if x.shape[2 + ax] + 2 * padding[ax] < k[ax]:
            raise ShapeError(
                f"conv3d: padded extent {x.shape[2 + ax] + 2 * padding[ax]} on axis "
                f"{_AXES[ax]} is smaller than kernel extent {k[ax]}",
                axis=_AXES[ax],
            )
    if bias is not None:
        bias = _t(bias, x)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({weight.shape[0]},)", axis="C")
    pad = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad) if any(padding) else x.data
    out = kernels.conv3d_forward(xp, weight.data, stride)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def back(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = kernels.conv3d_backward_input(g, weight.data, stride, xp.shape[2:])
            gx = gxp[(slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))]
        if needs[1]:
            gw = kernels.conv3d_backward_weight(xp, g, stride, k)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv3d", inputs, out, back, stride=stride, padding=padding)


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of :func:`conv3d`; ``weight`` is (C_in, C_out, kD, kH, kW).

    Output extent per axis is ``(in - 1) * stride - 2 * padding + kernel``.
    """
    x, weight = _t(x), _t(weight)
    stride, padding = _triple(stride), _triple(padding)
    _check_conv(x, weight, 0, "conv_transpose3d")
    k = weight.shape[2:]
    full = tuple((n - 1) * s + kk for n, s, kk in zip(x.shape[2:], stride, k))
    for ax in range(3):
        if full[ax] - 2 * padding[ax] < 1:
            raise ShapeError(
                f"conv_transpose3d: output extent on axis {_AXES[ax]} would be "
                f"{full[ax] - 2 * padding[ax]}",
                axis=_AXES[ax],
            )
    if bias is not None:
        bias = _t(bias, x)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"conv_transpose3d bias shape {bias.shape} != ({weight.shape[1]},)", axis="C")
    crop = (slice(None), slice(None)) + tuple(slice(p, f - p) for p, f in zip(padding, full))
    out_full = kernels.conv3d_backward_input(x.data, weight.data, stride, full)
    out = np.ascontiguousarray(out_full[crop])
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def back(g, needs):
        gx = gw = gb = None
        pad = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        gfull = np.pad(g, pad) if any(padding) else g
        if needs[0]:
            gx = kernels.conv3d_forward(gfull, weight.data, stride)
        if needs[1]:
            gw = kernels.conv3d_backward_weight(gfull, x.data, stride, k)
        if len(needs) > 2 and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv_transpose3d", inputs, out, back, stride=stride, padding=padding)


# ---------------------------------------------------------------- normalization


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over (N, D, H, W).

    Returns ``(out, (running_mean, running_var))``; in training mode the
    returned statistics are the momentum-updated ones, in eval mode the inputs
    are passed through unchanged.
    """
    x, gamma, beta = _t(x), _t(gamma, x), _t(beta, x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm affine params must have shape ({C},)", axis="C")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = _channel_view(np.zeros(C), x.ndim).shape
    ga = gamma.data.reshape(shape)
    be = beta.data.reshape(shape)
    if training:
        n = x.size // C
        if n < 2:
            raise ShapeError("batch_norm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        inv_std = 1 / np.sqrt(var + eps)
        xhat = centered * inv_std
        out = ga * xhat + be
        new_mean = (1 - momentum) * running_mean + momentum * mu.reshape(C)
        new_var = (1 - momentum) * running_var + momentum * var.reshape(C) * (n / (n - 1))

        def back(g, needs):
            gx = None
            if needs[0]:
                dxhat = g * ga
                gx = inv_std / n * (
                    n * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            gg = (g * xhat).sum(axis=axes) if needs[1] else None
            gb = g.sum(axis=axes) if needs[2] else None
            return gx, gg, gb

        res = _emit("batch_norm_train", (x, gamma, beta), out, back, eps=eps)
        return res, (new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype))

    rm = running_mean.astype(x.dtype).reshape(shape)
    inv_std = 1 / np.sqrt(running_var.astype(x.dtype).reshape(shape) + x.dtype.type(eps))
    xhat = (x.data - rm) * inv_std
    out = ga * xhat + be

    def back_eval(g, needs):
        gx = g * (ga * inv_std) if needs[0] else None
        gg = (g * xhat).sum(axis=axes) if needs[1] else None
        gb = g.sum(axis=axes) if needs[2] else None
        return gx, gg, gb

    res = _emit("batch_norm_eval", (x, gamma, beta), out, back_eval, eps=eps)
    return res, (running_mean, running_var)
