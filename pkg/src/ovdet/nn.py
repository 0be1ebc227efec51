"""Small trainable building blocks over the tensor core."""

from __future__ import annotations

import numpy as np

from .optim import Parameter
from .tensor import Tensor, add, conv2d, layer_norm, matmul, permute, reshape

DTYPE = np.float32


class ParamSet:
    """Flat registry of named parameters shared by a model's layers.

    dtype is float32 for training; float64 instances exist so gradient
    checking can drive the real layer code in wide precision.
    """

    def __init__(self, dtype=DTYPE):
        self._by_name: dict[str, Parameter] = {}
        self.dtype = dtype

    def parameter(self, name: str, array: np.ndarray, frozen: bool = False) -> Parameter:
        if name in self._by_name:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(array.astype(self.dtype), requires_grad=not frozen), frozen=frozen)
        self._by_name[name] = p
        return p

    def params(self) -> list[Parameter]:
        return [self._by_name[k] for k in sorted(self._by_name)]

    def __getitem__(self, name: str) -> Parameter:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self._by_name.items()}

    def load(self, arrays: dict[str, np.ndarray], prefix: str = "") -> int:
        """Copy matching records into existing parameters; returns count loaded."""
        loaded = 0
        for name, p in self._by_name.items():
            if not name.startswith(prefix):
                continue
            if name not in arrays:
                continue
            src = arrays[name]
            if tuple(src.shape) != tuple(p.tensor.data.shape):
                raise ValueError(f"shape mismatch loading {name!r}: {src.shape} vs {p.tensor.data.shape}")
            p.tensor.data[...] = src.astype(self.dtype)
            loaded += 1
        return loaded

    def freeze(self, prefix: str) -> None:
        for name, p in self._by_name.items():
            if name.startswith(prefix):
                p.frozen = True
                p.tensor.requires_grad = False

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self._by_name):
            if name.startswith(prefix):
                h.update(name.encode("utf-8"))
                h.update(np.ascontiguousarray(self._by_name[name].tensor.data).tobytes())
        return h.hexdigest()


def he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class Linear:
    def __init__(self, pset: ParamSet, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = pset.parameter(f"{name}.weight", he_init(rng, (d_out, d_in), d_in))
        self.b = pset.parameter(f"{name}.bias", np.zeros(d_out, dtype=pset.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        wt = permute(self.w.tensor, (1, 0))
        if len(x.shape) == 2:
            return add(matmul(x, wt), self.b.tensor)
        # batched input: flatten leading axes around a plain 2-D matmul
        lead = x.shape[:-1]
        flat = reshape(x, (int(np.prod(lead)), x.shape[-1]))
        out = add(matmul(flat, wt), self.b.tensor)
        return reshape(out, lead + (self.w.tensor.shape[0],))


class Conv2d:
    def __init__(self, pset: ParamSet, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int, padding: int, rng: np.random.Generator,
                 pad_mode: str = "zeros"):
        fan_in = c_in * kernel * kernel
        self.w = pset.parameter(f"{name}.weight", he_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.b = pset.parameter(f"{name}.bias", np.zeros(c_out, dtype=pset.dtype))
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.w.tensor, stride=self.stride, padding=self.padding,
                     pad_mode=self.pad_mode)
        bias = reshape(self.b.tensor, (1, self.b.tensor.shape[0], 1, 1))
        return add(out, bias)


class LayerNorm:
    """Normalization along one axis with learned per-feature scale and shift."""

    def __init__(self, pset: ParamSet, name: str, dim: int, axis: int, rank: int):
        shape = [1] * rank
        shape[axis] = dim
        self.g = pset.parameter(f"{name}.gamma", np.ones(shape, dtype=pset.dtype))
        self.b = pset.parameter(f"{name}.beta", np.zeros(shape, dtype=pset.dtype))
        self.axis = axis

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g.tensor, self.b.tensor, axis=self.axis)
