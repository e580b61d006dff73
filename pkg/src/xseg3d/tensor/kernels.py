"""3D convolution as unfold + matrix multiply, with backend selection.

The gather (``vol2col``) and scatter (``col2vol``) steps come from the
compiled extension when it imports, otherwise from the numpy fallback. Both
backends feed identical column matrices to the same ``np.matmul`` calls, so
results match bitwise across backends. Dtypes other than float32/float64
(e.g. longdouble for finite differences) always take the fallback. Set
``XSEG3D_BACKEND=python`` to force the fallback.

Large volumes are processed in slabs of output depth so that one column
matrix never exceeds ``MAX_COLUMN_ELEMENTS`` per sample. Slab boundaries
depend only on the layer geometry, never on the batch size.
"""
import os

import numpy as np

from . import _kernels_py

MAX_COLUMN_ELEMENTS = 1 << 22

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("XSEG3D_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"


def available_backends():
    names = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
        names["compiled"] = compiled
    except ImportError:
        pass
    return names


_COMPILED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _c(a):
    return a if a.flags.c_contiguous else np.ascontiguousarray(a)


def _pick(*arrays):
    if _impl is _kernels_py or any(a.dtype not in _COMPILED_DTYPES for a in arrays):
        return _kernels_py
    if len({a.dtype for a in arrays}) > 1:
        return _kernels_py
    return _impl


def _ints(t):
    return tuple(int(v) for v in t)


def _slabs(out_depth, rows, plane):
    """Output-depth ranges whose column matrices stay under the size cap."""
    per = max(1, MAX_COLUMN_ELEMENTS // max(rows * plane, 1))
    return [(a, min(a + per, out_depth)) for a in range(0, out_depth, per)]


def _geometry(spatial, kernel, stride):
    return tuple((n - k) // s + 1 for n, k, s in zip(spatial, kernel, stride))


def conv3d_forward(x, w, stride, impl=None):
    """Valid cross-correlation of padded ``x`` (N, Ci, ...) with ``w`` (Co, Ci, k...)."""
    stride = _ints(stride)
    impl = impl or _pick(x, w)
    N, Ci = x.shape[:2]
    Co = w.shape[0]
    kernel = w.shape[2:]
    Do, Ho, Wo = _geometry(x.shape[2:], kernel, stride)
    w2 = _c(w).reshape(Co, -1)
    out = np.empty((N, Co, Do, Ho, Wo), dtype=np.result_type(x, w))
    for a, b in _slabs(Do, w2.shape[1], Ho * Wo):
        xs = _c(x[:, :, a * stride[0] : (b - 1) * stride[0] + kernel[0]])
        cols = impl.vol2col(xs, kernel, stride)
        out[:, :, a:b] = np.matmul(w2, cols).reshape(N, Co, b - a, Ho, Wo)
    return out


def conv3d_backward_input(g, w, stride, in_shape, impl=None):
    """Gradient w.r.t. the padded input; also the transposed-conv forward."""
    stride = _ints(stride)
    in_shape = _ints(in_shape)
    impl = impl or _pick(g, w)
    N, Co, Do, Ho, Wo = g.shape
    Ci = w.shape[1]
    kernel = w.shape[2:]
    w2t = np.ascontiguousarray(_c(w).reshape(Co, -1).T)
    out = np.zeros((N, Ci) + in_shape, dtype=np.result_type(g, w))
    for a, b in _slabs(Do, w2t.shape[0], Ho * Wo):
        gs = _c(g[:, :, a:b]).reshape(N, Co, -1)
        cols = np.matmul(w2t, gs)
        z0, z1 = a * stride[0], (b - 1) * stride[0] + kernel[0]
        part = impl.col2vol(cols, Ci, (z1 - z0,) + in_shape[1:], kernel, stride)
        out[:, :, z0:z1] += part
    return out


def conv3d_backward_weight(x, g, stride, kernel, impl=None):
    """Gradient w.r.t. the weight, given padded input ``x`` and output gradient ``g``."""
    stride = _ints(stride)
    kernel = _ints(kernel)
    impl = impl or _pick(x, g)
    N, Ci = x.shape[:2]
    _, Co, Do, Ho, Wo = g.shape
    rows = Ci * kernel[0] * kernel[1] * kernel[2]
    gw = np.zeros((Co, rows), dtype=np.result_type(x, g))
    for a, b in _slabs(Do, rows, Ho * Wo):
        xs = _c(x[:, :, a * stride[0] : (b - 1) * stride[0] + kernel[0]])
        cols = impl.vol2col(xs, kernel, stride)
        gs = _c(g[:, :, a:b]).reshape(N, Co, -1)
        gw += np.matmul(gs, cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape((Co, Ci) + kernel)
