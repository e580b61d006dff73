# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels behind the matmul-based 3D convolution.

``vol2col`` unfolds every kernel tap of a padded volume into a column matrix;
``col2vol`` scatter-adds a column matrix back. Rows are ordered (channel,
kd, kh, kw) and columns (od, oh, ow). Each input element receives its
contributions in ascending tap order, the same order the numpy fallback in
``_kernels_py`` uses, so both backends agree bit for bit.
"""
import numpy as np

ctypedef fused real:
    float
    double


def vol2col(const real[:, :, :, :, ::1] x, tuple kernel, tuple stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t KD = kernel[0], KH = kernel[1], KW = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = (x.shape[2] - KD) // sd + 1
    cdef Py_ssize_t Ho = (x.shape[3] - KH) // sh + 1
    cdef Py_ssize_t Wo = (x.shape[4] - KW) // sw + 1
    dtype = np.float32 if real is float else np.float64
    cols_arr = np.empty((N, C * KD * KH * KW, Do * Ho * Wo), dtype=dtype)
    cdef real[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, kd, kh, kw, od, oh, ow, row, col, id_, ih
    for n in range(N):
        for c in range(C):
            for kd in range(KD):
                for kh in range(KH):
                    for kw in range(KW):
                        row = ((c * KD + kd) * KH + kh) * KW + kw
                        col = 0
                        for od in range(Do):
                            id_ = od * sd + kd
                            for oh in range(Ho):
                                ih = oh * sh + kh
                                for ow in range(Wo):
                                    cols[n, row, col] = x[n, c, id_, ih, ow * sw + kw]
                                    col += 1
    return cols_arr


def col2vol(const real[:, :, ::1] cols, Py_ssize_t C, tuple spatial, tuple kernel, tuple stride):
    cdef Py_ssize_t N = cols.shape[0]
    cdef Py_ssize_t Dp = spatial[0], Hp = spatial[1], Wp = spatial[2]
    cdef Py_ssize_t KD = kernel[0], KH = kernel[1], KW = kernel[2]
    cdef Py_ssize_t sd = stride[0], sh = stride[1], sw = stride[2]
    cdef Py_ssize_t Do = (Dp - KD) // sd + 1
    cdef Py_ssize_t Ho = (Hp - KH) // sh + 1
    cdef Py_ssize_t Wo = (Wp - KW) // sw + 1
    if cols.shape[1] != C * KD * KH * KW or cols.shape[2] != Do * Ho * Wo:
        raise ValueError("column matrix does not match the requested volume")
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((N, C, Dp, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, kd, kh, kw, od, oh, ow, row, col, id_, ih
    for n in range(N):
        for c in range(C):
            for kd in range(KD):
                for kh in range(KH):
                    for kw in range(KW):
                        row = ((c * KD + kd) * KH + kh) * KW + kw
                        col = 0
                        for od in range(Do):
                            id_ = od * sd + kd
                            for oh in range(Ho):
                                ih = oh * sh + kh
                                for ow in range(Wo):
                                    out[n, c, id_, ih, ow * sw + kw] += cols[n, row, col]
                                    col += 1
    return out_arr
