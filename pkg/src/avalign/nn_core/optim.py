"""AMSGrad with optional global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Parameter

__all__ = ["AMSGrad", "OptimizerStateError", "clip_grad_norm"]


class OptimizerStateError(RuntimeError):
    """A parameter has no gradient when a step is requested."""


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params)))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


@dataclass
class AMSGrad:
    """m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  vhat <- max(vhat, v);
    theta <- theta - lr m / (sqrt(vhat) + eps).

    State lives on each :class:`Parameter` (``p.state``) so it checkpoints
    with the parameter.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def step(self, params: list[Parameter]) -> float:
        for p in params:
            if p.grad is None:
                raise OptimizerStateError(f"parameter {p.name or '<unnamed>'} has no gradient")
        norm = clip_grad_norm(params, self.clip_norm) if self.clip_norm else float("nan")
        for p in params:
            g = p.grad
            st = p.state
            if not st:
                st["m"] = np.zeros_like(p.data)
                st["v"] = np.zeros_like(p.data)
                st["vhat"] = np.zeros_like(p.data)
                st["step"] = 0
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            st["vhat"] = np.maximum(st["vhat"], st["v"])
            st["step"] += 1
            p.data = p.data - self.lr * st["m"] / (np.sqrt(st["vhat"]) + self.eps)
            p.grad = None
        return norm
