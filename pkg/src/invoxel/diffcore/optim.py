from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr0: float
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @property
    def lr(self) -> float:
        """Learning rate applied by the next update."""
        return self.lr0 * self.decay ** self.step


def exp_decay_factor(lr0: float, lr_final: float, iters: int) -> float:
    """Per-step factor taking ``lr0`` to ``lr_final`` after ``iters`` steps."""
    if iters <= 0:
        return 1.0
    return (lr_final / lr0) ** (1.0 / iters)


def init_adam(params: list[Tensor], lr0: float, decay: float = 1.0, **kw) -> AdamState:
    st = AdamState(lr0=lr0, decay=decay, **kw)
    st.m = [np.zeros_like(p.data) for p in params]
    st.v = [np.zeros_like(p.data) for p in params]
    return st


def adam_step(state: AdamState, params: list[Tensor], grads: list[np.ndarray | None]) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``.

    A ``None`` gradient leaves that parameter and its moments untouched.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                         f"{len(state.m)} moment slots")
    lr = state.lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for parameter {i}: "
                             f"param {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        dt = p.data.dtype
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * g * g
        state.m[i] = m.astype(dt)
        state.v[i] = v.astype(dt)
        upd = (lr / c1) * state.m[i] / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data - upd).astype(dt)
    state.step = t
    return state
