"""Independent reference implementations used only by the tests.

Everything here is written for clarity over speed: explicit loops and
brute-force enumeration, sharing no code with the package.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def naive_conv3d(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Cross-correlation by direct summation over every output element."""
    x = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    N, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    sd, sh, sw = stride
    Do, Ho, Wo = (D - kd) // sd + 1, (H - kh) // sh + 1, (W - kw) // sw + 1
    out = np.zeros((N, Co, Do, Ho, Wo), dtype=np.result_type(x, w))
    for n, o, d, h, v in itertools.product(range(N), range(Co), range(Do), range(Ho), range(Wo)):
        patch = x[n, :, d * sd : d * sd + kd, h * sh : h * sh + kh, v * sw : v * sw + kw]
        out[n, o, d, h, v] = np.sum(patch * w[o])
    return out


def naive_conv_transpose3d(x, w, stride=(1, 1, 1), padding=(0, 0, 0)):
    """Scatter each input voxel times the kernel into the (uncropped) output."""
    N, Ci, D, H, W = x.shape
    _, Co, kd, kh, kw = w.shape
    sd, sh, sw = stride
    full = np.zeros((N, Co, (D - 1) * sd + kd, (H - 1) * sh + kh, (W - 1) * sw + kw), dtype=np.result_type(x, w))
    for n, c, d, h, v in itertools.product(range(N), range(Ci), range(D), range(H), range(W)):
        full[n, :, d * sd : d * sd + kd, h * sh : h * sh + kh, v * sw : v * sw + kw] += x[n, c, d, h, v] * w[c]
    pd, ph, pw = padding
    return full[:, :, pd : full.shape[2] - pd, ph : full.shape[3] - ph, pw : full.shape[4] - pw]


def brute_dsc(x, y):
    a = {tuple(p) for p in np.argwhere(x)}
    b = {tuple(p) for p in np.argwhere(y)}
    if not a and not b:
        return 1.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def brute_hausdorff(x, y, spacing=None):
    """Symmetric Hausdorff by O(|X|·|Y|) enumeration."""
    spacing = np.ones(x.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(x).astype(np.float64) * spacing
    b = np.argwhere(y).astype(np.float64) * spacing
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return math.sqrt(float(np.sum((np.array(x.shape) * spacing) ** 2)))

    def directed(p, q):
        worst = 0.0
        for pt in p:
            worst = max(worst, float(np.sqrt(((q - pt) ** 2).sum(axis=1)).min()))
        return worst

    return max(directed(a, b), directed(b, a))


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain Adam trajectory (no weight decay), one update per gradient."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
        out.append(theta.copy())
    return out


def brute_rle(mask):
    """Runs by walking the row-major flattened mask pixel by pixel."""
    runs = []
    start = None
    flat = list(np.asarray(mask, dtype=bool).ravel())
    for i, on in enumerate(flat + [False]):
        if on and start is None:
            start = i
        elif not on and start is not None:
            runs.append((start + 1, i - start))
            start = None
    return " ".join(f"{s} {n}" for s, n in runs)
