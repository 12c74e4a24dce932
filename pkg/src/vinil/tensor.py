"""Dense float64 tensors with tape-based reverse-mode differentiation.

Ops record onto the active :class:`Tape` (entered with ``with Tape():``)
whenever one of their inputs requires a gradient. Outside a tape every op
is a plain numpy forward pass, which is what evaluation code relies on.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "matmul",
    "transpose",
    "affine",
    "conv2d",
    "relu",
    "sum",
    "mean",
    "batch_mean",
    "batch_std",
    "log_softmax",
    "reshape",
    "flatten",
    "backward",
    "numerical_gradient",
    "gradcheck",
]


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "vinil_active_tape", default=None
)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError("tensor", arr.shape)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        # (tape, node index) for tensors produced by a recorded op
        self.tape_id: tuple[Tape, int] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.tape_id is None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the ops executed while it is active.

    Nodes are appended as ops run, so every node's inputs precede it.
    A tape is consumed by a single :func:`backward` call.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn) -> None:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); open a new Tape")
        output.tape_id = (self, len(self.nodes))
        output.requires_grad = True
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, inputs: Sequence[Tensor], out_values: np.ndarray, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out.requires_grad = False
    out.name = None
    out.tape_id = None
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", (a, b), a.values + b.values, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", (a, b), a.values - b.values, bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make("mul", (a, b), a.values * b.values, bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.values == 0):
        raise ZeroDivisionError("div: divisor contains zeros")

    def bw(g):
        ga = g / b.values
        gb = -g * a.values / (b.values * b.values)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", (a, b), a.values / b.values, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", (a,), -a.values, lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", (a,), a.values * a.values, lambda g: (2.0 * a.values * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return _make("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.values.T, a.values.T @ g

    return _make("matmul", (a, b), a.values @ b.values, bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for x of shape (B, in), W (in, out), b (out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError("affine", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise ShapeError("affine", W.shape, b.shape)

    def bw(g):
        return g @ W.values.T, x.values.T @ g, g.sum(axis=0)

    return _make("affine", (x, W, b), x.values @ W.values + b.values, bw)


def conv2d(x, W, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B, C, H, W) with kernels W (O, C, kh, kw)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} or padding={padding}")
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1]:
        raise ShapeError("conv2d", x.shape, W.shape)
    if b.shape != (W.shape[0],):
        raise ShapeError("conv2d", W.shape, b.shape)
    B, C, H, Wd = x.shape
    O, _, kh, kw = W.shape
    Hp, Wp = H + 2 * padding, Wd + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError("conv2d", x.shape, W.shape)
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, O, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
            out += np.einsum("bchw,oc->bohw", patch, W.values[:, :, i, j], optimize=True)
    out += b.values[None, :, None, None]

    def bw(g):
        gW = np.zeros_like(W.values)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None),
                      slice(i, i + stride * Ho, stride), slice(j, j + stride * Wo, stride))
                gW[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl], optimize=True)
                gxp[sl] += np.einsum("bohw,oc->bchw", g, W.values[:, :, i, j], optimize=True)
        gx = gxp[:, :, padding : padding + H, padding : padding + Wd]
        return gx, gW, g.sum(axis=(0, 2, 3))

    return _make("conv2d", (x, W, b), out, bw)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", (a,), np.asarray(out, dtype=np.float64), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.values.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean", (a,), np.asarray(out, dtype=np.float64), bw)


def batch_mean(a) -> Tensor:
    """Per-column mean over the batch axis, kept as shape (1, D)."""
    return mean(a, axis=0, keepdims=True)


def batch_std(a, eps: float = 1e-5) -> Tensor:
    """Population std over the batch axis, shape (1, D).

    Columns whose std falls below ``eps`` are treated as constant: their
    output is exactly 0 and they pass no gradient.
    """
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("batch_std", a.shape)
    n = a.shape[0]
    centered = a.values - a.values.mean(axis=0, keepdims=True)
    std = np.sqrt((centered * centered).mean(axis=0, keepdims=True))
    live = std >= eps
    std = np.where(live, std, 0.0)
    safe = np.where(live, std, 1.0)

    def bw(g):
        return (np.where(live, g * centered / (n * safe), 0.0),)

    return _make("batch_std", (a,), std, bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", (a,), out, bw)


# -- shape -------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


# -- backward ----------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.shape != () and loss.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if loss.tape_id is None:
        raise RuntimeError("backward: loss was not recorded on an active tape")
    tape, last = loss.tape_id
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(tape.nodes[: last + 1]):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
    tape.consumed = True
    tape.nodes.clear()


# -- finite-difference oracle ------------------------------------------------


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                       index: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. ``inputs[index]``."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        up = fn(*[Tensor(x) for x in base]).item()
        target[idx] = orig - h
        down = fn(*[Tensor(x) for x in base]).item()
        target[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
              h: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare tape gradients of ``fn`` with central differences.

    Returns the worst relative error ``max|a - n| / max(max|n|, 1e-8)`` over
    all inputs and raises AssertionError when it exceeds ``rtol``.
    """
    params = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape():
        out = fn(*params)
        backward(out)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = numerical_gradient(fn, inputs, i, h)
        scale = max(np.abs(numeric).max(), 1e-8)
        err = float(np.abs(analytic - numeric).max() / scale)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(f"gradcheck failed on input {i}: relative error {err:.3e}")
    return worst
