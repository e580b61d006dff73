"""Numpy fallback for the compiled gather/scatter kernels.

Python loops run over the kernel taps only; each tap moves a whole strided
block at once. ``col2vol`` adds the taps in ascending order, which matches
the per-element accumulation order of ``_kernels.pyx``.
"""
import numpy as np


def _out_extent(spatial, kernel, stride):
    return tuple((n - k) // s + 1 for n, k, s in zip(spatial, kernel, stride))


def _tap(kd, kh, kw, out_shape, stride):
    Do, Ho, Wo = out_shape
    sd, sh, sw = stride
    return (
        slice(None),
        slice(None),
        slice(kd, kd + sd * (Do - 1) + 1, sd),
        slice(kh, kh + sh * (Ho - 1) + 1, sh),
        slice(kw, kw + sw * (Wo - 1) + 1, sw),
    )


def vol2col(x, kernel, stride):
    N, C = x.shape[:2]
    KD, KH, KW = kernel
    out_sp = _out_extent(x.shape[2:], kernel, stride)
    cols = np.empty((N, C, KD, KH, KW) + out_sp, dtype=x.dtype)
    for kd in range(KD):
        for kh in range(KH):
            for kw in range(KW):
                cols[:, :, kd, kh, kw] = x[_tap(kd, kh, kw, out_sp, stride)]
    return cols.reshape(N, C * KD * KH * KW, -1)


def col2vol(cols, C, spatial, kernel, stride):
    N = cols.shape[0]
    KD, KH, KW = kernel
    out_sp = _out_extent(spatial, kernel, stride)
    if cols.shape[1] != C * KD * KH * KW or cols.shape[2] != int(np.prod(out_sp)):
        raise ValueError("column matrix does not match the requested volume")
    c6 = cols.reshape((N, C, KD, KH, KW) + out_sp)
    out = np.zeros((N, C) + tuple(spatial), dtype=cols.dtype)
    for kd in range(KD):
        for kh in range(KH):
            for kw in range(KW):
                out[_tap(kd, kh, kw, out_sp, stride)] += c6[:, :, kd, kh, kw]
    return out
