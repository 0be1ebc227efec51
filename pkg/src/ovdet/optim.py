"""Named trainable parameters and momentum SGD with global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class Parameter:
    """A named tensor the optimizer may update; frozen ones never change."""

    name: str
    tensor: Tensor
    frozen: bool = False

    def __post_init__(self):
        if not self.frozen:
            self.tensor.requires_grad = True
            if self.tensor.grad is None:
                self.tensor.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.tensor.data).tobytes()).hexdigest()


@dataclass
class SGD:
    """Momentum SGD. step() consumes gradients and zeroes them afterwards.

    If clip_norm is set, gradients are rescaled so their global L2 norm
    (across all non-frozen parameters) does not exceed it.
    """

    params: list[Parameter]
    lr: float
    momentum: float = 0.0
    clip_norm: float | None = None
    _velocity: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self) -> None:
        live = [p for p in self.params if not p.frozen and p.tensor.grad is not None]
        if self.clip_norm is not None and live:
            sq = 0.0
            for p in live:
                g = p.tensor.grad
                sq += float((g.astype(np.float64) ** 2).sum())
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                scale = np.float32(self.clip_norm / norm)
                for p in live:
                    p.tensor.grad *= scale
        for p in live:
            v = self._velocity.get(id(p))
            if v is None or self.momentum == 0.0:
                v = np.zeros_like(p.tensor.data)
            v = self.momentum * v + p.tensor.grad
            self._velocity[id(p)] = v
            p.tensor.data -= np.asarray(self.lr, dtype=p.tensor.dtype) * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            if p.tensor.grad is not None:
                p.tensor.grad[...] = 0.0


def global_grad_norm(params: list[Parameter]) -> float:
    sq = 0.0
    for p in params:
        if p.tensor.grad is not None:
            sq += float((p.tensor.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(sq))
