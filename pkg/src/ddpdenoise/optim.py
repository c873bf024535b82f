"""Adam and dynamic loss scaling for mixed-precision training."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .models import Graph
from .nn import autocast
from .tensor import Tensor, backward, scale


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step_count": self.step_count}


def adam_step(g: Graph, s: AdamState) -> None:
    """One bias-corrected Adam update of every parameter that has a gradient.

    Gradients are left in place; the caller zeroes them.
    """
    for p in g.params.values():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise ContractError("adam_step got a non-finite gradient")
    s.step_count += 1
    t = s.step_count
    c1 = 1.0 - s.beta1 ** t
    c2 = 1.0 - s.beta2 ** t
    for name, p in g.params.items():
        if p.grad is None:
            continue
        dt = p.data.dtype
        grad = p.grad.astype(dt)
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        v = s.v[name]
        m *= dt.type(s.beta1)
        m += dt.type(1 - s.beta1) * grad
        v *= dt.type(s.beta2)
        v += dt.type(1 - s.beta2) * grad * grad
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data -= dt.type(s.lr) * m_hat / (np.sqrt(v_hat) + dt.type(s.eps))


@dataclass
class LossScalerState:
    scale: float = 2.0 ** 16
    growth_interval: int = 2000
    growth_factor: float = 2.0
    backoff_factor: float = 0.5
    good_step_streak: int = 0

    def to_dict(self) -> dict:
        return {"scale": self.scale, "growth_interval": self.growth_interval,
                "growth_factor": self.growth_factor, "backoff_factor": self.backoff_factor,
                "good_step_streak": self.good_step_streak}


def autocast_forward(g: Graph, batch: Tensor, amp: bool, mode: str = "train") -> list[Tensor]:
    """Forward pass with convolutions in emulated binary16 when ``amp`` is on."""
    with autocast(amp):
        return g.forward(batch, mode)


def scale_and_backward(loss: Tensor, sc: LossScalerState):
    """Backpropagate ``loss * sc.scale``; gradients are left scaled.

    Overflow here is expected and handled by :func:`unscale_check_update`,
    so numpy's overflow warnings are suppressed.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return backward(scale(loss, sc.scale))


def unscale_check_update(g: Graph, s: AdamState, sc: LossScalerState) -> str:
    """Unscale gradients, then either apply Adam or skip on overflow.

    Returns ``"applied"`` or ``"skipped"``. Gradients are cleared either way.
    """
    finite = True
    inv = 1.0 / sc.scale
    for p in g.params.values():
        if p.grad is None:
            continue
        p.grad = p.grad * p.grad.dtype.type(inv)
        if finite and not np.all(np.isfinite(p.grad)):
            finite = False
    if finite:
        adam_step(g, s)
        sc.good_step_streak += 1
        if sc.good_step_streak >= sc.growth_interval:
            sc.scale *= sc.growth_factor
            sc.good_step_streak = 0
        outcome = "applied"
    else:
        sc.scale *= sc.backoff_factor
        sc.good_step_streak = 0
        outcome = "skipped"
    g.zero_grad()
    return outcome
