"""Adam with L2 regularization added to the gradient."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, np.ndarray],
              lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place; ``weight_decay * param`` is
    added to each gradient before the moment updates."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"{name}: gradient shape {g.shape} vs parameter {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer over a fixed set of named tensors.

    ``ascent=True`` maximizes (the gradient is negated).  With ``clip_norm``
    the objective gradient is clipped to that global norm before the L2 term.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.last_grad_norm = 0.0

    def step(self, grads: dict[str, np.ndarray], ascent: bool = False) -> None:
        grads = {k: grads[k] for k in self.params if k in grads}
        if ascent:
            grads = {k: -g for k, g in grads.items()}
        if self.clip_norm is not None:
            grads, self.last_grad_norm = clip_by_global_norm(grads, self.clip_norm)
        adam_step(self.state, self.params, grads, self.lr, self.weight_decay)
