"""Reverse-mode automatic differentiation over float64 numpy arrays.

Define-by-run engine: every op returns a Tensor that remembers its parent
tensors and a vector-Jacobian closure.  backward() on a scalar walks the
recorded graph once in reverse topological order and returns a gradient for
every leaf marked requires_grad, whether that leaf is a model parameter or an
attack's input image.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class UnknownOpError(ValueError):
    """Op kind not present in the primitive registry."""


class _RecordingState(threading.local):
    # thread-local so parallel attack/eval jobs cannot disable each other's
    # graph recording
    on = True


_RECORDING = _RecordingState()


@contextmanager
def no_grad():
    """Disable graph recording; ops become pure functions of their inputs."""
    prev = _RECORDING.on
    _RECORDING.on = False
    try:
        yield
    finally:
        _RECORDING.on = prev


def recording_enabled() -> bool:
    return _RECORDING.on


class Tensor:
    """float64 array plus optional graph node (parents + vjp closure)."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        head = f"Tensor(shape={self.shape}"
        if self.name:
            head += f", name={self.name!r}"
        if self.requires_grad:
            head += ", requires_grad=True"
        return head + ")"

    # arithmetic sugar; all routed through the registered primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Iterable[Tensor], vjp) -> Tensor:
    """Record a new graph node; public so other modules can add custom ops.

    vjp(g) must return one array (or None) per parent, aligned with `parents`.
    When recording is off, or no parent needs gradients, the result is a free
    tensor with no graph attached.
    """
    parents = tuple(parents)
    out = Tensor(data)
    if _RECORDING.on and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes that numpy broadcasting introduced or stretched."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss for every requires_grad leaf.

    One reverse pass; shared subexpressions accumulate contributions from
    every path before their own vjp runs (topological order guarantees it).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(topo):
        if node._vjp is None:
            continue
        g = grads.pop(node, None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"vjp produced shape {pg.shape} for parent of shape {parent.shape}"
                )
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else acc + pg
    return {t: g for t, g in grads.items() if t._vjp is None}


# ---------------------------------------------------------------------------
# primitives


def _binary(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e

    def vjp(g):
        ga = _unbroadcast(vjp_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(vjp_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return from_op(data, (a, b), vjp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return from_op(data, (a, b), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    # gradient at exactly 0 is defined as 0
    mask = a.data > 0
    return from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} exceeds hi {hi}")
    mask = (a.data >= lo) & (a.data <= hi)
    return from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    # d softplus = sigmoid, computed overflow-free as exp(x - softplus(x))
    sig = np.exp(a.data - data)
    return from_op(data, (a,), lambda g: (g * sig,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return from_op(data, (a,), lambda g: (g * data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return from_op(data, (a,), lambda g: (g * 0.5 / data,))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return from_op(y, (a,), vjp)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: needs at least one input")
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        outs = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            outs.append(np.moveaxis(g[lo:hi], 0, axis) if p.requires_grad else None)
        return outs

    return from_op(data, parts, vjp)


def conv2d(x, w, pad: int = 0) -> Tensor:
    """Direct 2-D cross-correlation, stride 1, zero padding.

    x: [N, Cin, H, W], w: [Cout, Cin, kh, kw] -> [N, Cout, Ho, Wo].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if pad < 0:
        raise ValueError(f"conv2d: negative padding {pad}")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape} with pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # windows[n, c, y, x, i, j] is a strided view; tensordot contracts it
    # against the kernel in one shot (direct summation over c, i, j)
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    data = np.tensordot(windows, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def vjp(g):
        gw = None
        if w.requires_grad:
            gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            # input gradient is the full correlation of g with the
            # flipped kernel, channels transposed
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = np.lib.stride_tricks.sliding_window_view(gp, (kh, kw), axis=(2, 3))
            wf = w.data[:, :, ::-1, ::-1]
            gxp = np.tensordot(gwin, wf, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw

    return from_op(data, (x, w), vjp)


def mean_pool(x, size: int) -> Tensor:
    """Non-overlapping size x size window average over [N, C, H, W]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"mean_pool: expected 4-d input, got {x.shape}")
    if size < 1:
        raise ValueError(f"mean_pool: window {size} must be >= 1")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"mean_pool: window {size} does not tile input {x.shape}")
    ho, wo = h // size, w // size
    data = x.data.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def vjp(g):
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (up / (size * size),)

    return from_op(data, (x,), vjp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...] | None:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, x.shape).copy(),)

    return from_op(data, (x,), vjp)


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    data = x.data.mean(axis=axes, keepdims=keepdims)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))

    def vjp(g):
        if axes is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, x.shape).copy(),)

    return from_op(data, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e
    return from_op(data, (x,), lambda g: (g.reshape(x.shape),))


def log_softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable log softmax built from primitives.

    The max shift is treated as a constant; by shift invariance this leaves
    the gradient exact.
    """
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    s = sub(x, shift)
    return sub(s, log(tensor_sum(exp(s), axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# registry

_REGISTRY: dict[str, Callable] = {
    "add": lambda ins, at: add(*ins),
    "sub": lambda ins, at: sub(*ins),
    "mul": lambda ins, at: mul(*ins),
    "div": lambda ins, at: div(*ins),
    "neg": lambda ins, at: neg(*ins),
    "matmul": lambda ins, at: matmul(*ins),
    "conv2d": lambda ins, at: conv2d(ins[0], ins[1], pad=at.get("pad", 0)),
    "relu": lambda ins, at: relu(*ins),
    "clamp": lambda ins, at: clamp(ins[0], at["lo"], at["hi"]),
    "softplus": lambda ins, at: softplus(*ins),
    "log": lambda ins, at: log(*ins),
    "exp": lambda ins, at: exp(*ins),
    "sqrt": lambda ins, at: sqrt(*ins),
    "softmax": lambda ins, at: softmax(ins[0], axis=at.get("axis", -1)),
    "concat": lambda ins, at: concat(ins, axis=at.get("axis", 1)),
    "mean_pool": lambda ins, at: mean_pool(ins[0], at["size"]),
    "sum": lambda ins, at: tensor_sum(ins[0], at.get("axis"), at.get("keepdims", False)),
    "mean": lambda ins, at: tensor_mean(ins[0], at.get("axis"), at.get("keepdims", False)),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
}


def registered_ops() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def apply(op: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Dispatch an op by kind name; the uniform entry point over primitives."""
    fn = _REGISTRY.get(op)
    if fn is None:
        raise UnknownOpError(f"unknown op kind {op!r}; known: {', '.join(registered_ops())}")
    return fn([as_tensor(t) for t in inputs], attrs or {})


def finite_difference_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar f at x.

    Independent oracle for backward(): evaluates f 2*size times with
    recording disabled and returns an array shaped like x.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(Tensor(x0))
            flat[i] = orig - h
            lo = f(Tensor(x0))
            flat[i] = orig
            hi = hi.item() if isinstance(hi, Tensor) else float(hi)
            lo = lo.item() if isinstance(lo, Tensor) else float(lo)
            gflat[i] = (hi - lo) / (2.0 * h)
    return grad
