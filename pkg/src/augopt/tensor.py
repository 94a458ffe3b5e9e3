"""Reverse-mode automatic differentiation on numpy arrays.

A Tensor wraps an ndarray and, when gradients are enabled, remembers how it
was produced: a tuple of (parent, vjp) pairs, where each vjp maps the
gradient of this tensor to the gradient contribution of that parent.  Nodes
carry a monotonically increasing construction id, so the graph is acyclic by
construction and `backward` can sweep it in exact reverse construction
order, which makes gradient accumulation deterministic bit for bit.

`backward(wrt=...)` first marks which nodes are actually needed to reach the
requested leaves and skips every vjp that feeds only unneeded subgraphs, so
e.g. differentiating a loss with respect to one sub-network never touches
the weight gradients of another.

Convolution forward/backward products are delegated to torch's CPU kernels
for speed; everything else is plain numpy.  Operations never mutate their
input arrays.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as _F

__all__ = [
    "Tensor",
    "no_grad",
    "grad_enabled",
    "matmul",
    "concat",
    "conv2d",
    "dense",
    "max_pool2",
    "global_avg_pool",
    "finite_difference",
    "Rng",
]

_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_order")

    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._order = next(Tensor._ids)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _node(data: np.ndarray, parents: Sequence[tuple["Tensor", Callable]]) -> "Tensor":
        """Wrap an op result, recording edges only to parents that need grad."""
        if _grad_enabled:
            live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
            if live:
                out = Tensor(data, requires_grad=True)
                out._parents = live
                return out
        return Tensor(data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- backward -------------------------------------------------------------

    def backward(self, wrt: Iterable["Tensor"] | None = None) -> None:
        """Accumulate gradients of this scalar into `.grad` of the leaves.

        `wrt` limits the sweep: only nodes on a path from this output to one
        of the given tensors receive gradients, everything else is skipped.
        With `wrt=None` every tensor with requires_grad participates.
        Accumulation order is fixed by construction ids, so repeated runs
        produce bitwise identical gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        # Reachable subgraph, parents before children.
        seen = {id(self)}
        stack = [self]
        nodes = [self]
        while stack:
            node = stack.pop()
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    seen.add(id(parent))
                    stack.append(parent)
                    nodes.append(parent)
        nodes.sort(key=lambda n: n._order)

        if wrt is None:
            needed = {id(n) for n in nodes if n.requires_grad}
        else:
            needed = {id(t) for t in wrt}
            for node in nodes:
                if id(node) in needed:
                    continue
                for parent, _ in node._parents:
                    if id(parent) in needed:
                        needed.add(id(node))
                        break

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(nodes):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                if id(parent) not in needed:
                    continue
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib

        targets = nodes if wrt is None else list(wrt)
        for t in targets:
            g = grads.get(id(t))
            if g is None or not t._is_leaf():
                continue
            t.grad = g if t.grad is None else t.grad + g

    def _is_leaf(self) -> bool:
        return not self._parents

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.data.dtype != self.data.dtype:
                raise TypeError(f"dtype mismatch: {self.data.dtype} vs {other.data.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = self.data + other.data
        return Tensor._node(out, [
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ])

    __radd__ = __add__

    def __neg__(self):
        return Tensor._node(-self.data, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor._node(a * b, [
            (self, lambda g: _unbroadcast(g * b, a.shape)),
            (other, lambda g: _unbroadcast(g * a, b.shape)),
        ])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor._node(a / b, [
            (self, lambda g: _unbroadcast(g / b, a.shape)),
            (other, lambda g: _unbroadcast(-g * a / (b * b), b.shape)),
        ])

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    # -- elementwise ----------------------------------------------------------

    def relu(self) -> "Tensor":
        out = np.maximum(self.data, 0)
        mask = self.data > 0
        return Tensor._node(out, [(self, lambda g: g * mask)])

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor._node(out, [(self, lambda g: g * out * (1.0 - out))])

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._node(out, [(self, lambda g: g * out)])

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._node(np.log(x), [(self, lambda g: g / x)])

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._node(out, [(self, lambda g: g * 0.5 / out)])

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        out = np.clip(x, lo, hi)
        mask = (x >= lo) & (x <= hi)
        return Tensor._node(out, [(self, lambda g: g * mask)])

    # -- reductions and shape -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, x.shape).copy() if np.ndim(g) == 0 else np.full(x.shape, g, dtype=x.dtype)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, x.shape).astype(x.dtype, copy=False) + np.zeros_like(x)

        return Tensor._node(np.asarray(out), [(self, vjp)])

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        x = self.data
        n = x.size if axis is None else x.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self.data
        return Tensor._node(x.reshape(shape), [(self, lambda g: g.reshape(x.shape))])

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError(f"transpose expects a 2-d tensor, got shape {self.data.shape}")
        return Tensor._node(self.data.T.copy(), [(self, lambda g: g.T.copy())])

    def gather_rows(self, indices: np.ndarray) -> "Tensor":
        """Select rows along axis 0; duplicate indices accumulate on backward."""
        idx = np.asarray(indices, dtype=np.int64)
        x = self.data
        out = x[idx]

        def vjp(g):
            full = np.zeros_like(x)
            np.add.at(full, idx, g)
            return full

        return Tensor._node(out, [(self, vjp)])

    def column(self, k: int) -> "Tensor":
        """Select column k of a 2-d tensor as a 1-d tensor."""
        if self.data.ndim != 2:
            raise ValueError(f"column expects a 2-d tensor, got shape {self.data.shape}")
        x = self.data
        out = x[:, k].copy()

        def vjp(g):
            full = np.zeros_like(x)
            full[:, k] = g
            return full

        return Tensor._node(out, [(self, vjp)])

    def diagonal(self) -> "Tensor":
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"diagonal expects a square matrix, got shape {self.data.shape}")
        x = self.data
        out = np.diagonal(x).copy()

        def vjp(g):
            full = np.zeros_like(x)
            np.fill_diagonal(full, g)
            return full

        return Tensor._node(out, [(self, vjp)])


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d tensors, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    ad, bd = a.data, b.data
    return Tensor._node(ad @ bd, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    parents = []
    for i, t in enumerate(tensors):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append((t, vjp))
    return Tensor._node(out, parents)


# -- neural-net primitives ----------------------------------------------------


def _to_torch(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW layout, kernel [C_out, C_in, k, k].

    Output spatial size is floor((H + 2*padding - k) / stride) + 1; trailing
    rows and columns that do not fit a full stride step are dropped.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"channel mismatch: input has {xd.shape[1]}, weight expects {wd.shape[1]}")
    if wd.shape[2] != wd.shape[3] or wd.shape[2] % 2 != 1:
        raise ValueError(f"kernel must be square with odd side, got {wd.shape[2:]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    k = wd.shape[2]
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ValueError(f"input {xd.shape[2:]} with padding {padding} smaller than kernel {k}")
    if xd.dtype != wd.dtype:
        raise TypeError(f"dtype mismatch: {xd.dtype} vs {wd.dtype}")
    if b is not None:
        bd = b.data
        if bd.shape != (wd.shape[0],):
            raise ValueError(f"bias shape {bd.shape} does not match {wd.shape[0]} output channels")
        if bd.dtype != xd.dtype:
            raise TypeError(f"dtype mismatch: {xd.dtype} vs {bd.dtype}")

    xt, wt = _to_torch(xd), _to_torch(wd)
    with torch.no_grad():
        out_t = _F.conv2d(xt, wt, None, stride=stride, padding=padding)
        if b is not None:
            out_t = out_t + _to_torch(b.data).reshape(1, -1, 1, 1)
    out = out_t.numpy()

    def vjp_x(g):
        with torch.no_grad():
            gi = torch.nn.grad.conv2d_input(list(xd.shape), wt, _to_torch(g), stride=stride, padding=padding)
        return gi.numpy()

    def vjp_w(g):
        with torch.no_grad():
            gw = torch.nn.grad.conv2d_weight(xt, list(wd.shape), _to_torch(g), stride=stride, padding=padding)
        return gw.numpy()

    parents = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        parents.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return Tensor._node(out, parents)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: [B, N] input, [M, N] weights, [M] bias -> [B, M]."""
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(f"dense expects 2-d input and weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(f"dense shapes incompatible: input {xd.shape}, weight {wd.shape}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"bias shape {bd.shape} does not match {wd.shape[0]} outputs")
    if not (xd.dtype == wd.dtype == bd.dtype):
        raise TypeError(f"dtype mismatch: {xd.dtype}, {wd.dtype}, {bd.dtype}")
    out = xd @ wd.T + bd
    return Tensor._node(out, [
        (x, lambda g: g @ wd),
        (w, lambda g: g.T @ xd),
        (b, lambda g: g.sum(axis=0)),
    ])


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first
    window position in row-major order."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"max_pool2 expects a 4-d tensor, got shape {xd.shape}")
    B, C, H, W = xd.shape
    if H % 2 or W % 2:
        raise ValueError(f"max_pool2 needs even spatial dims, got {H}x{W}")
    win = xd.reshape(B, C, H // 2, 2, W // 2, 2)
    flat = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        return gf.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)

    return Tensor._node(out, [(x, vjp)])


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of an NCHW tensor -> [B, C]."""
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d tensor, got shape {xd.shape}")
    B, C, H, W = xd.shape
    out = xd.mean(axis=(2, 3))
    scale = np.asarray(1.0 / (H * W), dtype=xd.dtype)

    def vjp(g):
        return np.broadcast_to(g[:, :, None, None] * scale, xd.shape).copy()

    return Tensor._node(out, [(x, vjp)])


# -- testing utilities --------------------------------------------------------


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a
    time.  Intended for test oracles; cost is 2 * x.size evaluations."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2.0 * h)
    return grad


class Rng:
    """Deterministic random stream: PCG64 seeded from (seed, stream).

    Derived streams (per epoch, per worker) use the same seed with a
    distinct stream id, so they are independent and reproducible.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._g = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, self.stream))))

    def derive(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    def uniform(self, lo: float, hi: float, shape=(), dtype=np.float64) -> Tensor:
        return Tensor(self._g.uniform(lo, hi, size=shape).astype(dtype, copy=False))

    def standard_normal(self, shape=(), dtype=np.float64) -> Tensor:
        return Tensor(self._g.standard_normal(size=shape).astype(dtype, copy=False))

    def permutation(self, n: int) -> np.ndarray:
        return self._g.permutation(n)

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        return self._g.integers(lo, hi, size=shape)
