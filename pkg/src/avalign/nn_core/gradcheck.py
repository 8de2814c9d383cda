"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor, no_grad

__all__ = ["GradCheckReport", "gradient_check"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    h: float
    tol: float
    n_checked: int
    worst: str = ""
    per_input: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} (h={self.h:g}, tol={self.tol:g}, "
                f"coords={self.n_checked}, worst={self.worst})")


def _scalar(out) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        shape = getattr(out, "shape", type(out).__name__)
        raise TypeError(f"gradient_check needs a scalar-valued function, got {shape}")
    return float(out.data.reshape(()))


def gradient_check(f, inputs, h: float = 1e-6, tol: float = 1e-4, floor: float = 1e-6,
                   max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f()`` with (f(x+h) - f(x-h)) / 2h.

    ``inputs`` are tensors with ``requires_grad`` that ``f`` closes over. The
    relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. When
    ``max_coords`` is set, that many coordinates per input are sampled.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise TypeError("gradient_check requires 64-bit tensors")
        x.grad = None
    with Tape() as tape:
        out = f()
        _scalar(out)
        tape.backward(out)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    worst, where, count, per = 0.0, "", 0, {}
    with no_grad():
        for k, (x, ga) in enumerate(zip(inputs, analytic)):
            flat = x.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = rng.choice(flat.size, size=max_coords, replace=False)
            local = 0.0
            for j in idx:
                old = flat[j]
                flat[j] = old + h
                fp = _scalar(f())
                flat[j] = old - h
                fm = _scalar(f())
                flat[j] = old
                num = (fp - fm) / (2 * h)
                a = ga.reshape(-1)[j]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                count += 1
                local = max(local, err)
                if err > worst:
                    worst, where = err, f"{x.name or f'input{k}'}[{j}]"
            per[x.name or f"input{k}"] = local
    for x in inputs:
        x.grad = None
    return GradCheckReport(worst, h, tol, count, where, per)
