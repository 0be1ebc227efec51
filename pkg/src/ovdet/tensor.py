"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array and, when any input of an operation requires
gradients, records the operation on a dynamic tape (parent links plus a
backward closure). Calling ``backward()`` on a scalar loss walks the tape in
reverse topological order and accumulates gradients into every leaf that
requires them. The graph is built per forward pass and garbage-collected once
the loss goes out of scope.

Training runs in float32; float64 inputs are preserved end to end so that
finite-difference gradient checking can run in wide precision.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "permute",
    "concat",
    "stack",
    "take_rows",
    "relu",
    "softmax",
    "log_softmax",
    "power",
    "tsum",
    "tmean",
    "batched_dot",
    "layer_norm",
    "dropout_mask",
    "conv2d",
    "avg_pool2d",
    "roi_align",
    "cross_entropy",
    "bce_with_logits",
    "smooth_l1",
]


class ShapeError(ValueError):
    """Dimension mismatch, tagged with the operation that rejected it."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    """N-dimensional array node in a dynamic differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        # Leaves that require gradients always carry a zero-initialized buffer
        # so a backward pass that never reaches them still leaves grad all-zero.
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None
        self._op = ""

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same data, severed from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag}, op={self._op or 'leaf'})"

    # -- graph plumbing -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.asarray(g, dtype=self.data.dtype).copy()
            if self.grad.shape != self.data.shape:  # scalar reduction seeds
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate d(self)/d(leaf) for every reachable leaf requiring grad.

        Repeated calls without zeroing accumulate into leaf gradients;
        interior gradients are rebuilt from scratch on every call.
        """
        if self.data.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # reset interior grads so repeated backward calls do not double count
        for node in topo:
            if node._grad_fn is not None:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other, like=self))

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, like=self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div", "tensor/tensor division is not part of the op set; "
                             "multiply by a precomputed reciprocal constant instead")
        return mul(self, as_tensor(1.0 / np.asarray(other), like=self))

    def __neg__(self):
        return mul(self, as_tensor(-1.0, like=self))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Wrap scalars/arrays as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        dtype = like.dtype if like is not None else DEFAULT_DTYPE
        arr = arr.astype(dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"operands {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent (a > 0 for fractional p)."""
    x = a.data

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g * p * np.power(x, p - 1.0))

    return _make(np.power(x, p), (a,), grad_fn, "power")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(a.data * mask, (a,), grad_fn, "relu")


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(data, (a,), grad_fn, "reshape")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError("permute", f"axes {axes} are not a permutation of rank {a.data.ndim}")
    inv = np.argsort(axes)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(g.transpose(inv)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), grad_fn, "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat", "empty tensor list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref):
            raise ShapeError("concat", f"rank mismatch {t.shape} vs {ref}")
        for ax, (da, db) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and da != db:
                raise ShapeError("concat", f"axis {ax} differs: {t.shape} vs {ref}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, grad_fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError("take_rows", f"expected 2-D table, got {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("take_rows", f"index out of range for table with {a.shape[0]} rows")

    def grad_fn(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

    return _make(a.data[idx], (a,), grad_fn, "take_rows")


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full_like(a.data, g))
            return
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        a._accumulate(np.broadcast_to(gx, a.shape).astype(a.dtype, copy=True))

    return _make(np.asarray(data), (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def batched_dot(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product of two equally shaped (N, d) tensors."""
    if a.shape != b.shape:
        raise ShapeError("batched_dot", f"shape mismatch {a.shape} vs {b.shape}")
    return tsum(mul(a, b), axis=-1)


# -- normalizing transforms ---------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    y = np.exp(x - x.max(axis=axis, keepdims=True))
    y /= y.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), grad_fn, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize along one axis, then scale and shift.

    gamma/beta must be shaped to broadcast against x (e.g. (1, C, 1, 1) for
    channel normalization of NCHW maps).
    """
    mu = tmean(x, axis=axis, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    inv = power(add(var, as_tensor(eps, like=x)), -0.5)
    return add(mul(mul(centered, inv), gamma), beta)


def dropout_mask(shape: tuple[int, ...], rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout multiplier; apply with mul() during training only."""
    if rate <= 0.0:
        return np.ones(shape, dtype=DEFAULT_DTYPE)
    keep = rng.random(shape) >= rate
    return keep.astype(DEFAULT_DTYPE) / DEFAULT_DTYPE(1.0 - rate)


# -- matrix products ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner axes differ: {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", f"batch axes differ: {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b._accumulate(a.data.swapaxes(-1, -2) @ g)

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


# -- convolution and pooling ---------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # (N, C, oh, ow, kh, kw) view over the padded input, then flattened patches
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           pad_mode: str = "zeros") -> Tensor:
    """2-D convolution (cross-correlation), NCHW input and OIHW weights.

    pad_mode "edge" replicates border pixels instead of zero-filling, which
    keeps border cells from developing padding-specific signatures.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input/weight, got {x.shape} and {w.shape}")
    if pad_mode not in ("zeros", "edge"):
        raise ShapeError("conv2d", f"unknown pad_mode {pad_mode!r}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", f"input has {c} channels, weight expects {ci}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} too large for input {h}x{wd} with padding {padding}")
    if padding:
        spec = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        xp = np.pad(x.data, spec, mode="edge" if pad_mode == "edge" else "constant")
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wm = w.data.reshape(co, ci * kh * kw)
    out = (cols @ wm.T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, co)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wm).reshape(n, oh, ow, ci, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            if padding:
                core = dxp[:, :, padding:-padding, padding:-padding]
                if pad_mode == "edge":
                    # replicated border pixels collect their padded copies' gradients
                    core = core.copy()
                    core[:, :, 0, :] += dxp[:, :, :padding, padding:-padding].sum(axis=2)
                    core[:, :, -1, :] += dxp[:, :, -padding:, padding:-padding].sum(axis=2)
                    core[:, :, :, 0] += dxp[:, :, padding:-padding, :padding].sum(axis=3)
                    core[:, :, :, -1] += dxp[:, :, padding:-padding, -padding:].sum(axis=3)
                    core[:, :, 0, 0] += dxp[:, :, :padding, :padding].sum(axis=(2, 3))
                    core[:, :, 0, -1] += dxp[:, :, :padding, -padding:].sum(axis=(2, 3))
                    core[:, :, -1, 0] += dxp[:, :, -padding:, :padding].sum(axis=(2, 3))
                    core[:, :, -1, -1] += dxp[:, :, -padding:, -padding:].sum(axis=(2, 3))
                dxp = core
            x._accumulate(dxp)

    return _make(np.ascontiguousarray(out), (x, w), grad_fn, "conv2d")


def avg_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected 4-D input, got {x.shape}")
    stride = stride or kernel
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("avg_pool2d", f"kernel {kernel} too large for input {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    out = win[:, :, ::stride, ::stride].mean(axis=(-1, -2))

    def grad_fn(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        share = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += share
        x._accumulate(dx)

    return _make(np.ascontiguousarray(out), (x,), grad_fn, "avg_pool2d")


def roi_align(fm: Tensor, rois: np.ndarray, out_size: int, spatial_scale: float, sampling: int = 2) -> Tensor:
    """Bilinear region-of-interest pooling over an NCHW feature map.

    rois: (R, 5) array of [batch_index, x1, y1, x2, y2] in input-image
    coordinates; spatial_scale converts them to feature coordinates.
    Sub-pixel boxes are clamped to a one-pixel minimum extent. Each output
    bin averages sampling x sampling bilinear samples.
    """
    if fm.data.ndim != 4:
        raise ShapeError("roi_align", f"expected 4-D feature map, got {fm.shape}")
    rois = np.asarray(rois, dtype=np.float64)
    if rois.ndim != 2 or rois.shape[1] != 5:
        raise ShapeError("roi_align", f"rois must be (R, 5), got {rois.shape}")
    n, c, hf, wf = fm.shape
    r = rois.shape[0]
    s = out_size
    bidx = rois[:, 0].astype(np.int64)
    x1 = rois[:, 1] * spatial_scale
    y1 = rois[:, 2] * spatial_scale
    x2 = np.maximum(rois[:, 3] * spatial_scale, x1 + spatial_scale)  # min 1-pixel extent
    y2 = np.maximum(rois[:, 4] * spatial_scale, y1 + spatial_scale)
    bw = (x2 - x1) / s
    bh = (y2 - y1) / s
    # sample offsets inside each bin: (p + 0.5) / sampling
    off = (np.arange(sampling) + 0.5) / sampling
    gx = x1[:, None, None] + (np.arange(s)[None, :, None] + off[None, None, :]) * bw[:, None, None]
    gy = y1[:, None, None] + (np.arange(s)[None, :, None] + off[None, None, :]) * bh[:, None, None]
    # continuous coords relative to cell centers; clamp into the map
    px = np.clip(gx - 0.5, 0, wf - 1)  # (R, s, sampling)
    py = np.clip(gy - 0.5, 0, hf - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x1i = np.minimum(x0 + 1, wf - 1)
    y1i = np.minimum(y0 + 1, hf - 1)
    fx = (px - x0).astype(fm.dtype)
    fy = (py - y0).astype(fm.dtype)

    # broadcast bin grids into flat per-sample-point arrays: P = s*s*sampling*sampling
    def mesh(yv, xv):
        yy = yv[:, :, None, :, None]  # (R, s, 1, sampling, 1)
        xx = xv[:, None, :, None, :]  # (R, 1, s, 1, sampling)
        yy, xx = np.broadcast_arrays(yy, xx)
        return yy.reshape(r, -1), xx.reshape(r, -1)

    y0f, x0f = mesh(y0, x0)
    y1f, x1f = mesh(y1i, x1i)
    fyf, fxf = mesh(fy, fx)
    wts = (
        ((1 - fyf) * (1 - fxf)),
        ((1 - fyf) * fxf),
        (fyf * (1 - fxf)),
        (fyf * fxf),
    )
    corners = ((y0f, x0f), (y0f, x1f), (y1f, x0f), (y1f, x1f))
    fmt = fm.data.transpose(0, 2, 3, 1)  # (N, H, W, C) so gathers land channel-last
    bflat = np.broadcast_to(bidx[:, None], y0f.shape)
    p = y0f.shape[1]
    acc = np.zeros((r, p, c), dtype=fm.dtype)
    for (yy, xx), wt in zip(corners, wts):
        acc += fmt[bflat, yy, xx] * wt[:, :, None].astype(fm.dtype)
    out = acc.reshape(r, s, s, sampling * sampling, c).mean(axis=3).transpose(0, 3, 1, 2)

    def grad_fn(g):
        if not fm.requires_grad:
            return
        gshare = (g.transpose(0, 2, 3, 1) / (sampling * sampling)).reshape(r, s, s, 1, c)
        gflat = np.broadcast_to(gshare, (r, s, s, sampling * sampling, c)).reshape(r, p, c)
        dfmt = np.zeros_like(fmt)
        for (yy, xx), wt in zip(corners, wts):
            np.add.at(dfmt, (bflat, yy, xx), gflat * wt[:, :, None].astype(fm.dtype))
        fm._accumulate(dfmt.transpose(0, 3, 1, 2))

    return _make(np.ascontiguousarray(out), (fm,), grad_fn, "roi_align")


# -- losses --------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy from raw logits against integer class targets."""
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy", f"expected (N, K) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError("cross_entropy", f"targets shape {targets.shape} does not match N={n}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ShapeError("cross_entropy", f"target id out of range for {k} classes")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(n), targets]
    probs = np.exp(logp)

    if reduction == "none":
        def grad_fn(g):
            if logits.requires_grad:
                d = probs * g[:, None]
                d[np.arange(n), targets] -= g
                logits._accumulate(d)

        return _make(nll, (logits,), grad_fn, "cross_entropy")
    if reduction != "mean":
        raise ShapeError("cross_entropy", f"unknown reduction {reduction!r}")

    def grad_fn(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), targets] -= 1.0
            logits._accumulate(d * (g / n))

    return _make(np.asarray(nll.mean()), (logits,), grad_fn, "cross_entropy")


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Numerically stable binary cross-entropy on raw logits."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ShapeError("bce_with_logits", f"targets {t.shape} vs logits {logits.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    n = x.size

    if reduction == "none":
        def grad_fn(g):
            if logits.requires_grad:
                logits._accumulate((sig - t) * g)

        return _make(loss, (logits,), grad_fn, "bce_with_logits")
    if reduction != "mean":
        raise ShapeError("bce_with_logits", f"unknown reduction {reduction!r}")

    def grad_fn(g):
        if logits.requires_grad:
            logits._accumulate((sig - t) * (g / n))

    return _make(np.asarray(loss.mean()), (logits,), grad_fn, "bce_with_logits")


def smooth_l1(pred: Tensor, target, beta: float = 1.0, reduction: str = "none") -> Tensor:
    """Huber-style regression loss: quadratic inside beta, linear outside."""
    t = as_tensor(target, like=pred)
    if t.shape != pred.shape:
        raise ShapeError("smooth_l1", f"target {t.shape} vs pred {pred.shape}")
    diff = pred.data - t.data
    absd = np.abs(diff)
    loss = np.where(absd < beta, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    dloss = np.where(absd < beta, diff / beta, np.sign(diff)).astype(pred.dtype)
    n = pred.data.size

    if reduction == "none":
        def grad_fn(g):
            if pred.requires_grad:
                pred._accumulate(g * dloss)
            if t.requires_grad:
                t._accumulate(-g * dloss)

        return _make(loss.astype(pred.dtype), (pred, t), grad_fn, "smooth_l1")
    if reduction not in ("mean", "sum"):
        raise ShapeError("smooth_l1", f"unknown reduction {reduction!r}")
    scale = 1.0 / n if reduction == "mean" else 1.0

    def grad_fn(g):
        if pred.requires_grad:
            pred._accumulate(dloss * (g * scale))
        if t.requires_grad:
            t._accumulate(-dloss * (g * scale))

    red = loss.mean() if reduction == "mean" else loss.sum()
    return _make(np.asarray(red, dtype=pred.dtype), (pred, t), grad_fn, "smooth_l1")
