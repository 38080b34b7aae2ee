"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are only recorded while a :class:`Tape` is active::

    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    report = backward(tape, y, [x])
    report[x]  # array([6.])

Outside a tape every operation is a plain numpy computation, which is what
:func:`fd_check` relies on for its finite-difference evaluations.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "GradientReport",
    "as_tensor",
    "backward",
    "fd_check",
    "gradient_report",
    "matmul",
    "softmax",
    "logsumexp",
    "concat",
    "conv2d",
    "relu",
    "exp",
    "log",
    "sqrt",
]

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # reductions and shape
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1):
        return max_(self, axis)

    def min(self, axis=-1):
        return min_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    """One recorded primitive: ``output = forward(*inputs)``."""

    op: str
    inputs: tuple
    output: Tensor
    forward: Callable
    vjp: Callable


class Tape:
    """Ordered record of the primitives evaluated while the tape is active.

    Nodes are appended as they execute, so the record is topologically
    sorted by construction.  Differentiable tensors that enter the record
    without being produced by it form the leaf set.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def _record(self, node: Node) -> None:
        for t in node.inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self._produced.add(id(node.output))
        self.nodes.append(node)

    def replay(self) -> list[np.ndarray]:
        """Re-run every node from the current input values, in order.

        Outputs are written back into the recorded tensors and returned.
        """
        outs = []
        for node in self.nodes:
            node.output.data = node.forward(*[t.data for t in node.inputs])
            outs.append(node.output.data)
        return outs

    def __len__(self):
        return len(self.nodes)


def _apply(op: str, forward: Callable, vjp: Callable, *inputs: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(forward(*[t.data for t in inputs]), dtype=np.float64)
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.name = None
    tape = active_tape()
    if tape is not None:
        tape._record(Node(op, inputs, out, forward, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _apply(
        "add",
        np.add,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a,
        b,
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _apply(
        "sub",
        np.subtract,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        a,
        b,
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _apply(
        "mul",
        np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a,
        b,
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    return _apply(
        "div",
        np.divide,
        lambda g, x, y, out: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * out / y, y.shape),
        ),
        a,
        b,
    )


def neg(a) -> Tensor:
    return _apply("neg", np.negative, lambda g, x, out: (-g,), as_tensor(a))


def power(a, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("only scalar exponents are supported")
    p = float(exponent)
    return _apply(
        "pow",
        lambda x: np.power(x, p),
        lambda g, x, out: (g * p * np.power(x, p - 1),),
        as_tensor(a),
    )


# elementwise unary ops


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, x, out: (g * out,), as_tensor(a))


def log(a) -> Tensor:
    return _apply("log", np.log, lambda g, x, out: (g / x,), as_tensor(a))


def sqrt(a) -> Tensor:
    return _apply("sqrt", np.sqrt, lambda g, x, out: (g * 0.5 / out,), as_tensor(a))


def relu(a) -> Tensor:
    return _apply(
        "relu",
        lambda x: np.maximum(x, 0.0),
        lambda g, x, out: (g * (x > 0),),
        as_tensor(a),
    )


# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dimensions like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def vjp(g, x, y, out):
        gx = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape)
        gy = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape)
        return gx, gy

    return _apply("matmul", np.matmul, vjp, a, b)


# reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return _apply(
        "sum",
        lambda x: np.sum(x, axis=axis, keepdims=keepdims),
        lambda g, x, out: (_expand_reduced(g, x.shape, axis, keepdims).copy(),),
        as_tensor(a),
    )


def _fsum(x: np.ndarray, axis) -> np.ndarray:
    if axis is None:
        return np.array(math.fsum(x.ravel()))
    moved = np.moveaxis(x, axis, -1)
    flat = moved.reshape(-1, moved.shape[-1])
    return np.array([math.fsum(row) for row in flat]).reshape(moved.shape[:-1])


def exact_sum(a, axis: Optional[int] = None) -> Tensor:
    """Correctly rounded sum (math.fsum), hence independent of element order."""
    return _apply(
        "exact_sum",
        lambda x: _fsum(x, axis),
        lambda g, x, out: (_expand_reduced(g, x.shape, axis, False).copy(),),
        as_tensor(a),
    )


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def _arg_reduce(name: str, pick: Callable, a, axis: int) -> Tensor:
    """max/min along one axis; the gradient goes to the first extremal entry."""

    def forward(x):
        return pick(x, axis=axis)

    def vjp(g, x, out):
        which = np.argmax(x, axis=axis) if pick is np.max else np.argmin(x, axis=axis)
        gx = np.zeros_like(x)
        np.put_along_axis(gx, np.expand_dims(which, axis), np.expand_dims(g, axis), axis)
        return (gx,)

    return _apply(name, forward, vjp, as_tensor(a))


def max_(a, axis: int = -1) -> Tensor:
    return _arg_reduce("max", np.max, a, axis)


def min_(a, axis: int = -1) -> Tensor:
    return _arg_reduce("min", np.min, a, axis)


def softmax(v, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    if temperature <= 0:
        raise ContractError("softmax temperature must be positive")
    t = float(temperature)

    def forward(x):
        z = (x - np.max(x, axis=axis, keepdims=True)) / t
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g, x, out):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner) / t,)

    return _apply("softmax", forward, vjp, as_tensor(v))


def logsumexp(v, axis: int = -1) -> Tensor:
    def forward(x):
        m = np.max(x, axis=axis, keepdims=True)
        s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
        return np.squeeze(s, axis=axis)

    def vjp(g, x, out):
        w = np.exp(x - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * w,)

    return _apply("logsumexp", forward, vjp, as_tensor(v))


# shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _apply(
        "reshape",
        lambda x: np.reshape(x, shape),
        lambda g, x, out: (g.reshape(x.shape),),
        a,
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _apply(
        "transpose",
        lambda x: np.transpose(x, axes),
        lambda g, x, out: (np.transpose(g, inv),),
        a,
    )


def getitem(a, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""

    def vjp(g, x, out):
        gx = np.zeros_like(x)
        np.add.at(gx, index, g)
        return (gx,)

    return _apply("getitem", lambda x: x[index], vjp, as_tensor(a))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def forward(*xs):
        try:
            return np.concatenate(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from exc

    def vjp(g, *args):
        return tuple(np.split(g, bounds, axis=axis))

    return _apply("concat", forward, vjp, *tensors)


# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NHWC input with an (kh, kw, C_in, C_out) kernel."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    kh, kw, cin, cout = w.shape

    def forward(xd, wd):
        cols = _im2col(xd, kh, kw, stride, padding)
        return np.tensordot(cols, wd, axes=([3, 4, 5], [0, 1, 2]))

    def vjp(g, xd, wd, out):
        cols = _im2col(xd, kh, kw, stride, padding)
        gw = np.tensordot(cols, g, axes=([0, 1, 2], [0, 1, 2]))
        gcols = np.tensordot(g, wd, axes=([3], [3]))  # (B, Ho, Wo, kh, kw, C_in)
        b, h, wid, _ = xd.shape
        ho, wo = g.shape[1], g.shape[2]
        gxp = np.zeros((b, h + 2 * padding, wid + 2 * padding, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, :, i, j]
        gx = gxp[:, padding : padding + h, padding : padding + wid] if padding else gxp
        return gx, gw

    return _apply("conv2d", forward, vjp, x, w)


# differentiation


@dataclass
class GradientReport:
    """Gradients for a list of parameters, aligned by position."""

    params: list
    grads: list
    max_rel_error: Optional[float] = None
    per_param_error: list = field(default_factory=list)

    def __getitem__(self, param: Tensor) -> np.ndarray:
        for p, g in zip(self.params, self.grads):
            if p is param:
                return g
        raise KeyError("tensor is not part of this report")

    def __iter__(self):
        return iter(zip(self.params, self.grads))

    def __len__(self):
        return len(self.params)


def backward(tape: Tape, output: Tensor, params: Optional[Sequence[Tensor]] = None) -> GradientReport:
    """Reverse sweep over ``tape`` starting from the scalar ``output``.

    ``params`` defaults to the tape's leaf set.  Parameters the output does
    not depend on get zero gradients.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.vjp(g, *[t.data for t in node.inputs], node.output.data)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(t.shape)
    targets = list(tape.leaves if params is None else params)
    out = []
    for p in targets:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.asarray(g).reshape(p.shape))
    return GradientReport(targets, out)


def _central_differences(f: Callable[[], Tensor], p: Tensor, eps: float) -> np.ndarray:
    flat = p.data.reshape(-1)
    num = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(as_tensor(f()).data.sum())
        flat[i] = orig - eps
        down = float(as_tensor(f()).data.sum())
        flat[i] = orig
        num[i] = (up - down) / (2 * eps)
    return num.reshape(p.shape)


def gradient_report(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> GradientReport:
    """Analytic gradients of ``f()`` plus their agreement with central differences.

    ``f`` takes no arguments and reads the current values of ``params``,
    which are perturbed in place (and restored) during the check.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    params = list(params)
    with Tape() as tape:
        out = f()
    report = backward(tape, out, params)
    errors = []
    for p, g in report:
        num = _central_differences(f, p, eps)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        errors.append(float(np.max(np.abs(g - num) / denom)) if g.size else 0.0)
    report.per_param_error = errors
    report.max_rel_error = max(errors) if errors else 0.0
    return report


def fd_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return gradient_report(f, params, eps).max_rel_error
