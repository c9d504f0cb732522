"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output adjoint to parent adjoints.
:meth:`Tensor.backward` replays those closures in reverse topological order
(the :class:`Tape`) and accumulates gradients on leaf tensors.

Broadcasting follows numpy rules; adjoints are summed back to the operand
shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DomainError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "matmul",
    "affine",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "square",
    "sqrt",
    "softplus",
    "sigmoid",
    "tanh",
    "clamp_max",
    "reduce",
    "sum",
    "mean",
    "concat",
    "grad_check",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float64 buffer.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    name : str, optional
        Label used in diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data if data.dtype == np.float64 else data.astype(np.float64)
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        return t

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None, check_finite: bool = True) -> None:
        """Propagate adjoints from this tensor to every reachable leaf.

        Gradients accumulate into ``.grad`` of leaves with
        ``requires_grad=True``; repeated calls add up.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        if check_finite and not np.all(np.isfinite(self.data)):
            tape = Tape.from_output(self)
            raise NonFiniteError(f"non-finite output{tape.locate_non_finite()}")
        if not self.requires_grad:
            return
        tape = Tape.from_output(self)
        tape.backward(self, grad, check_finite=check_finite)


class Tape:
    """Operations reachable from an output, in topological order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            key = id(node)
            if key in seen:
                continue
            seen.add(key)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def locate_non_finite(self) -> str:
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                return f" first produced by op '{node._op}' with shape {node.shape}"
        return ""

    def backward(self, out: Tensor, grad: np.ndarray, check_finite: bool = True) -> None:
        grads = {id(out): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if check_finite and not np.all(np.isfinite(g)):
                    label = node.name or f"leaf{node.shape}"
                    raise NonFiniteError(f"non-finite gradient for {label}{self.locate_non_finite()}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                prev = grads.get(k)
                grads[k] = pg if prev is None else prev + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple, backward: Callable, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if is_grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward
                out._op = op
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# binary elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


# unary elementwise


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError(f"log of negative input (min {x.data.min():.6g})")
    xd = x.data
    with np.errstate(divide="ignore"):
        out = np.log(xd)
    return _result(out, (x,), lambda g: (g / xd,), "log")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError(f"sqrt of negative input (min {x.data.min():.6g})")
    out = np.sqrt(x.data)
    with np.errstate(divide="ignore"):
        return _result(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def _stable_softplus(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x) -> Tensor:
    """log(1 + exp(x)), evaluated as max(x, 0) + log1p(exp(-|x|))."""
    x = as_tensor(x)
    xd = x.data
    return _result(
        _stable_softplus(xd), (x,), lambda g: (g * _stable_sigmoid(xd),), "softplus"
    )


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp_max(x, limit: float) -> Tensor:
    """min(x, limit); the adjoint is zero where the clamp is active."""
    x = as_tensor(x)
    keep = x.data <= limit
    return _result(np.minimum(x.data, limit), (x,), lambda g: (g * keep,), "clamp_max")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "neg": neg,
    "square": square,
    "sqrt": sqrt,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, exp, log, neg, square, sqrt)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def affine(x, weight, bias=None) -> Tensor:
    """x @ weight + bias as a single tape node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is None:
        parents = (x, weight)
    else:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"affine: bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, parents, backward, "affine")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)
    src = x.shape
    out = x.data[index]

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _result(np.array(out), (x,), backward, "getitem")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(ts), backward, "concat")


# reductions


def _check_axis(x: Tensor, axis) -> None:
    if axis is not None and not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"axis {axis} out of range for tensor of rank {x.ndim}")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    _check_axis(x, axis)
    src = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis)
    src = x.shape
    n = x.size if axis is None else src[axis]

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _result(np.asarray(x.data.mean(axis=axis)), (x,), backward, "mean")


def reduce(op: str, x, axis: int | None = None) -> Tensor:
    if op == "sum":
        return sum(x, axis)
    if op == "mean":
        return mean(x, axis)
    raise ValueError(f"unknown reduction {op!r}")


# finite-difference oracle


def _scalar_value(out, where: str) -> float:
    val = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
    if val.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got shape {val.shape}")
    v = float(val.reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError(f"function value is non-finite at {where}")
    return v


def grad_check(f: Callable, x, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central differences.

    Parameters
    ----------
    f : callable
        Maps a Tensor (or a dict of Tensors when ``x`` is a mapping) to a
        scalar Tensor.
    x : array_like or mapping of str to array_like
        Point at which to check.
    eps : float
        Central-difference step.

    Returns
    -------
    float
        ``max |analytic - numeric| / max(1, |analytic|)`` over all coordinates.
    """
    if isinstance(x, Mapping):
        base = {k: np.array(v, dtype=np.float64) for k, v in x.items()}
        keyed = True
    else:
        base = {"x": np.array(x, dtype=np.float64)}
        keyed = False

    def call(arrays, grad):
        ts = {k: Tensor(v, requires_grad=grad, name=k) for k, v in arrays.items()}
        return ts, f(ts if keyed else ts["x"])

    ts, out = call(base, True)
    _scalar_value(out, "the base point")
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    worst = 0.0
    for k, arr in base.items():
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            _, hi = call(base, False)
            fp = _scalar_value(hi, f"{k}{list(idx)} + eps")
            arr[idx] = orig - eps
            _, lo = call(base, False)
            fm = _scalar_value(lo, f"{k}{list(idx)} - eps")
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
