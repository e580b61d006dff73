"""AdamW and the one-cycle learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingDivergedError


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2

    def to_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"adamw.m/{k}": a for k, a in self.m.items()}
        arrays.update({f"adamw.v/{k}": a for k, a in self.v.items()})
        meta = {"t": self.t, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}
        return arrays, meta

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> "OptimizerState":
        m = {k[len("adamw.m/"):]: a for k, a in arrays.items() if k.startswith("adamw.m/")}
        v = {k[len("adamw.v/"):]: a for k, a in arrays.items() if k.startswith("adamw.v/")}
        return cls(m, v, int(meta["t"]), tuple(meta["betas"]), float(meta["eps"]), float(meta["weight_decay"]))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update with weight decay decoupled from the gradient moments.

    Returns new parameter arrays and a new state; inputs are not modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {name!r}", step=state.t)
    b1, b2 = state.betas
    t = state.t + 1
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m_prev = state.m.get(name)
        v_prev = state.v.get(name)
        m = (1 - b1) * g if m_prev is None else b1 * m_prev + (1 - b1) * g
        v = (1 - b2) * (g * g) if v_prev is None else b2 * v_prev + (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        update = m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta
        new_params[name] = (theta - lr * update).astype(theta.dtype)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)
    return new_params, OptimizerState(new_m, new_v, t, state.betas, state.eps, state.weight_decay)


def peak_step(total_steps: int, warmup_fraction: float = 0.3) -> int:
    return int(round(warmup_fraction * (total_steps - 1)))


def onecycle_lr(
    step: int,
    total_steps: int,
    lr_peak: float,
    lr_min: float,
    warmup_fraction: float = 0.3,
    div_factor: float = 25.0,
) -> float:
    """Linear warmup from ``lr_peak / div_factor`` then cosine decay to ``lr_min``.

    The peak is reached exactly at step ``round(warmup_fraction * (total_steps - 1))``
    and the last step returns ``lr_min``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if lr_min > lr_peak:
        raise ValueError("lr_min must not exceed lr_peak")
    top = peak_step(total_steps, warmup_fraction)
    if step == top:
        return lr_peak
    if step < top:
        start = lr_peak / div_factor
        return start + (lr_peak - start) * step / top
    last = total_steps - 1
    if step == last:
        return lr_min
    frac = (step - top) / (last - top)
    return lr_min + (lr_peak - lr_min) * 0.5 * (1 + math.cos(math.pi * frac))
