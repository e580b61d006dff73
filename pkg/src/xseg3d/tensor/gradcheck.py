"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, Tape, backward


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    mode="float64",
    fd_dtype=None,
    elements: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps tensors to a scalar tensor. Analytic gradients are computed in
    ``mode``; the differences are evaluated in ``fd_dtype``, which defaults to
    ``np.longdouble`` for 64-bit mode so the rounding floor sits below float64.
    With ``elements`` set, only that many randomly chosen entries across all
    inputs are perturbed.

    Per element the error is ``|a - d| / max(|a|, |d|, 1e-12)``.
    """
    mode = np.dtype(mode)
    if fd_dtype is None:
        fd_dtype = np.longdouble if mode == np.float64 else mode
    fd_dtype = np.dtype(fd_dtype)
    tensors = [Tensor(np.asarray(x), requires_grad=True, dtype=mode) for x in inputs]
    with Tape() as tape:
        out = f(*tensors)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    grads = backward(tape, out)
    analytic = [grads[t].astype(np.float64) for t in tensors]

    base = [np.asarray(x, dtype=mode).astype(fd_dtype) for x in inputs]
    index = [(i, j) for i, b in enumerate(base) for j in range(b.size)]
    if elements is not None and elements < len(index):
        pick = np.random.default_rng(seed).choice(len(index), size=elements, replace=False)
        index = [index[k] for k in sorted(pick)]

    def evaluate(arrays):
        return np.asarray(f(*[Tensor(a, dtype=fd_dtype) for a in arrays]).data).reshape(())

    worst = 0.0
    for i, j in index:
        plus = [b if k != i else b.copy() for k, b in enumerate(base)]
        minus = [b if k != i else b.copy() for k, b in enumerate(base)]
        x0 = base[i].flat[j]
        h = fd_dtype.type(epsilon) * max(fd_dtype.type(1), abs(x0))
        plus[i].flat[j] = x0 + h
        minus[i].flat[j] = x0 - h
        step = plus[i].flat[j] - minus[i].flat[j]
        d = float((evaluate(plus) - evaluate(minus)) / step)
        a = float(analytic[i].flat[j])
        err = abs(a - d) / max(abs(a), abs(d), 1e-12)
        worst = max(worst, err)
    return worst
