"""Minimal deterministic tensor library with reverse-mode autodiff.

All data is float64, row-major numpy arrays. Ops build an implicit graph
through parent links and backward closures; `backward` walks it once in
reverse topological order, accumulating gradients additively at fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["Tensor", "ShapeError", "forward", "backward", "grad_check", "concat"]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = "leaf"):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # ---- elementwise arithmetic (limited numpy broadcasting) ----

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data
        out = Tensor(out_data, _parents=(self, other), op="add")
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,), op="neg")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        out = Tensor(self.data * other.data, _parents=(self, other), op="mul")
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = Tensor(self.data / other.data, _parents=(self, other), op="div")
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g * self.data / other.data ** 2, other.shape))
            out._backward = bw
        return out

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    # ---- nonlinearities ----

    def relu(self):
        mask = self.data > 0
        out = Tensor(np.where(mask, self.data, 0.0), _parents=(self,), op="relu")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * mask)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, _parents=(self,), op="tanh")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * (1.0 - y ** 2))
        return out

    def abs(self):
        sign = np.sign(self.data)
        out = Tensor(np.abs(self.data), _parents=(self,), op="abs")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * sign)
        return out

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, _parents=(self,), op="exp")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * y)
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,), op="log")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g / self.data)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = Tensor(y, _parents=(self,), op="sqrt")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g * 0.5 / y)
        return out

    # ---- reductions ----

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), _parents=(self,), op="sum")
        if out.requires_grad:
            def bw(g):
                gg = g
                if axis is not None and not keepdims:
                    gg = np.expand_dims(gg, axis)
                self._accumulate(np.broadcast_to(gg, self.shape).copy())
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else _axis_size(self.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # ---- shape manipulation ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), _parents=(self,), op="reshape")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _parents=(self,), op="transpose")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.transpose(inv))
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _parents=(self,), op="slice")
        if out.requires_grad:
            def bw(g):
                buf = np.zeros_like(self.data)
                np.add.at(buf, idx, g)
                self._accumulate(buf)
            out._backward = bw
        return out


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for a in axis:
        n *= shape[a]
    return n


# ---------------------------------------------------------------------------
# non-method primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims of `a` broadcast against 2-D `b`."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), op="matmul")
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis; x may carry arbitrary leading dims."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    out = matmul(x.reshape((-1, x.shape[-1])), w).reshape(lead + (w.shape[1],))
    if b is not None:
        out = out + b
    return out


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, _parents=(x,), op="softmax_lastdim")
    if out.requires_grad:
        def bw(g):
            dot = (g * y).sum(axis=-1, keepdims=True)
            x._accumulate(y * (g - dot))
        out._backward = bw
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane of an NCHW tensor to zero
    mean / unit variance. No learnable affine terms."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW, got shape {x.shape}")
    ax = (2, 3)
    mu = x.data.mean(axis=ax, keepdims=True)
    var = x.data.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = Tensor(y, _parents=(x,), op="instance_norm")
    if out.requires_grad:
        n = x.shape[2] * x.shape[3]
        def bw(g):
            gm = g.mean(axis=ax, keepdims=True)
            gy = (g * y).mean(axis=ax, keepdims=True)
            x._accumulate(inv * (g - gm - y * gy))
        out._backward = bw
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution, NCHW input and OIHW weight.

    Zero padding of k//2 keeps spatial size at stride 1; stride 2 halves it
    (even input sizes assumed). Odd kernel sizes only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be OIHW, got {w.shape}")
    n, c, h, wdt = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channels differ: input {c}, weight {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)
    y = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    if b is not None:
        y = y + b.data.reshape(1, o, 1, 1)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(y, _parents=parents, op="conv2d")
    if out.requires_grad:
        ho, wo = y.shape[2], y.shape[3]
        def bw(g):
            if w.requires_grad:
                w._accumulate(np.einsum("nchwij,nohw->ocij", win, g, optimize=True))
            if b is not None and b.requires_grad:
                b._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                gcol = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[..., i, j]
                x._accumulate(gxp[:, :, ph:ph + h, pw:pw + wdt])
        out._backward = bw
    return out


def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution; weight shape (O, C) or (O, C, 1, 1)."""
    if w.data.ndim == 2:
        w = w.reshape(w.shape[0], w.shape[1], 1, 1)
    return conv2d(x, w, b, stride=1)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"avg_pool2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d: size {h}x{w} not divisible by {factor}")
    y = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    out = Tensor(y, _parents=(x,), op="avg_pool2d")
    if out.requires_grad:
        def bw(g):
            gg = g[:, :, :, None, :, None] / (factor * factor)
            x._accumulate(np.broadcast_to(gg, (n, c, h // factor, factor, w // factor, factor))
                          .reshape(n, c, h, w).copy())
        out._backward = bw
    return out


def nearest_upsample2d(x: Tensor, factor: int = 2) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"nearest_upsample2d expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor(y, _parents=(x,), op="nearest_upsample2d")
    if out.requires_grad:
        def bw(g):
            x._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))
        out._backward = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} vs {t.shape} on axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(y, _parents=tuple(tensors), op="concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = bw
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    return concat(tensors, axis=1)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    return x.mean(axis=axis)


# ---------------------------------------------------------------------------
# op dispatch / backward / gradient checking
# ---------------------------------------------------------------------------

_OPS: dict[str, Callable] = {
    "add": lambda a, b: a + b,
    "mul": lambda a, b: a * b,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv1x1": conv1x1,
    "relu": lambda a: a.relu(),
    "tanh": lambda a: a.tanh(),
    "softmax_lastdim": softmax_lastdim,
    "instance_norm": instance_norm,
    "avg_pool2d": avg_pool2d,
    "nearest_upsample2d": nearest_upsample2d,
    "concat_channels": lambda *ts: concat_channels(ts),
    "mean_over_axis": mean_over_axis,
    "linear": linear,
}


def forward(op_kind: str, inputs: Iterable[Tensor], attrs: dict | None = None) -> Tensor:
    """Validated dispatch over the primitive op set."""
    if op_kind not in _OPS:
        raise ValueError(f"unknown op kind {op_kind!r}")
    inputs = [_wrap(t) for t in inputs]
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError(f"non-finite input to op {op_kind!r}")
    return _OPS[op_kind](*inputs, **(attrs or {}))


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; grads accumulate additively."""
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    # Stash pre-existing grads so a repeated call adds one clean sweep
    # instead of re-propagating already-accumulated values.
    stashed = {}
    for node in topo:
        if node.grad is not None:
            stashed[id(node)] = node.grad
            node.grad = None
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        prev = stashed.get(id(node))
        if prev is not None:
            if node.grad is None:
                node.grad = prev
            else:
                node.grad += prev


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4) -> dict:
    """Compare analytic gradients of `fn()` against central differences.

    `fn` must be a deterministic closure over `params`; returns a report with
    per-parameter max relative error and an overall pass flag.
    """
    base = fn()
    base2 = fn()
    if not np.array_equal(base.data, base2.data):
        raise ValueError("grad_check: fn is non-deterministic (two passes disagree)")
    for p in params:
        p.zero_grad()
    backward(fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, an in zip(params, analytic):
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        denom = np.maximum(np.abs(an) + np.abs(num), 1e-8)
        errors.append(float(np.max(np.abs(an - num) / denom)) if an.size else 0.0)
    max_err = max(errors) if errors else 0.0
    return {"per_param": errors, "max_rel_error": max_err, "passed": max_err < tol}
