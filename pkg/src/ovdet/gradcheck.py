"""Central finite-difference verification of analytic gradients.

Checks run in float64: callers build their graphs from float64 tensors so
the finite-difference noise floor stays well below the pass tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    """Per-input relative errors between analytic and numeric gradients."""

    passed: bool
    max_rel_err: float
    per_input: list[float] = field(default_factory=list)
    reason: str = ""

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        extra = f" ({self.reason})" if self.reason else ""
        return f"{state} max_rel_err={self.max_rel_err:.3e}{extra}"


def grad_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor] | Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare backward() gradients of the scalar f() against (f(x+eps)-f(x-eps))/2eps.

    f must be deterministic and rebuild its graph from the tensors in wrt on
    every call; wrt tensors should hold float64 data.
    """
    tensors = [wrt] if isinstance(wrt, Tensor) else list(wrt)
    for t in tensors:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, np.inf, reason="non-finite value of f at x")
    out.backward()
    analytic = [t.grad.copy() for t in tensors]

    per_input: list[float] = []
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().data.reshape(-1)[0]
            flat[i] = orig - eps
            lo = f().data.reshape(-1)[0]
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return GradCheckReport(False, np.inf, reason="non-finite value of f near x")
            num[i] = (hi - lo) / (2.0 * eps)
        a = ana.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        rel = np.abs(a - num) / denom
        per_input.append(float(rel.max()) if rel.size else 0.0)

    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(worst < tol, worst, per_input)
