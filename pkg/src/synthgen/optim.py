"""AdamW with decoupled weight decay, learning-rate decay and EMA tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """One in-place update of ``params``; returns ``params`` for chaining."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameter keys")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= state.lr * update
    return params


def lr_schedule(base_lr: float, epoch: float, total_epochs: float, kind: str = "linear") -> float:
    """Linear decay to a floor of ``base_lr / 100``; ``kind="constant"`` disables it."""
    if kind == "constant":
        return base_lr
    if kind != "linear":
        raise ValueError(f"unknown schedule {kind!r}")
    if total_epochs <= 0:
        return base_lr
    return max(base_lr * (1.0 - epoch / total_epochs), base_lr / 100.0)


def ema_update(teacher: dict, student: dict, alpha: float) -> dict:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("EMA decay must lie in [0, 1]")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"{name}: shape {s.shape} != {t.shape}")
        if alpha == 0.0:
            t[...] = s
        elif alpha != 1.0:
            t *= alpha
            t += (1.0 - alpha) * s
    return teacher
