"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to a :class:`Var`. Calling
:func:`backward` on a scalar output walks the record once, in reverse, and
returns the gradient of that scalar with respect to every parameter leaf.

The primitives are plain functions that accept either ``Var`` or array-like
operands. When no operand is attached to a tape the function just evaluates
with numpy and returns an ``ndarray``, so model code can be written once and
run with or without gradient tracking.
"""

from __future__ import annotations

import weakref
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

GradientMap = dict[str, np.ndarray]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class Var:
    """A value produced on a tape."""

    __slots__ = ("value", "_tape", "index", "parents", "vjp", "op", "name", "requires_grad", "__weakref__")
    __array_ufunc__ = None  # let ndarray <op> Var dispatch to the reflected Var method

    def __init__(self, value, tape, op, parents=(), vjp=None, name=None, requires_grad=False):
        self.value = value
        self._tape = weakref.ref(tape)
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.requires_grad = requires_grad
        self.index = -1

    @property
    def tape(self) -> "Tape":
        tape = self._tape()
        if tape is None:
            raise RuntimeError("the tape this Var was recorded on no longer exists")
        return tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        label = self.name or self.op
        return f"Var({label}, shape={self.shape}, node={self.index})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return take(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    Nodes are numbered as they are created, so every operand precedes its
    consumers and a sweep in decreasing index order is a valid topological
    order. The tape only holds weak references to intermediate nodes; the
    graph stays alive through the outputs the caller keeps.
    """

    def __init__(self):
        self._nodes: list[weakref.ref] = []
        self.params: dict[str, Var] = {}

    @property
    def nodes(self) -> list[Var]:
        return [n for n in (r() for r in self._nodes) if n is not None]

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, var: Var) -> Var:
        var.index = len(self._nodes)
        self._nodes.append(weakref.ref(var))
        return var

    def param(self, name: str, value) -> Var:
        """Register a differentiable leaf under ``name``."""
        if name in self.params:
            raise KeyError(f"parameter {name!r} already bound on this tape")
        var = Var(_as_array(value), self, "param", name=name, requires_grad=True)
        self.params[name] = var
        return self._record(var)

    def const(self, value, name: str | None = None) -> Var:
        return self._record(Var(_as_array(value), self, "const", name=name))

    def params_from(self, tensors: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in tensors.items()}


def _as_array(value) -> np.ndarray:
    if isinstance(value, Var):
        return value.value
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _tape_of(args: Iterable) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _apply(op: str, args: Sequence, compute: Callable, vjps: Callable | None):
    """Evaluate ``compute`` on raw values and, if any operand is taped, record it.

    ``vjps(g, out, *values)`` must return one cotangent (or ``None``) per arg.
    """
    tape = _tape_of(args)
    values = [_as_array(a) for a in args]
    try:
        out = compute(*values)
    except ValueError as exc:
        where = f"node {len(tape)}" if tape is not None else "untaped"
        shapes = ", ".join(str(v.shape) for v in values)
        raise ShapeError(f"{op} ({where}): incompatible operand shapes {shapes}") from exc
    out = np.asarray(out, dtype=np.float64)
    if tape is None:
        return out
    parents = tuple(a if isinstance(a, Var) else None for a in args)
    needs = any(p is not None and p.requires_grad for p in parents)
    var = Var(out, tape, op, parents=parents, requires_grad=needs)
    if needs:
        var.vjp = lambda g: vjps(g, out, *values)
    return tape._record(var)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    return _apply(
        "add", (a, b), np.add,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b):
    return _apply(
        "sub", (a, b), np.subtract,
        lambda g, out, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b):
    return _apply(
        "mul", (a, b), np.multiply,
        lambda g, out, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def div(a, b):
    return _apply(
        "div", (a, b), np.divide,
        lambda g, out, x, y: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
    )


def neg(a):
    return _apply("neg", (a,), np.negative, lambda g, out, x: (-g,))


def square(a):
    return _apply("square", (a,), np.square, lambda g, out, x: (2.0 * g * x,))


def sqrt(a):
    return _apply("sqrt", (a,), np.sqrt, lambda g, out, x: (g * 0.5 / out,))


def exp(a):
    return _apply("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def log(a):
    return _apply("log", (a,), np.log, lambda g, out, x: (g / x,))


def sin(a):
    return _apply("sin", (a,), np.sin, lambda g, out, x: (g * np.cos(x),))


def cos(a):
    return _apply("cos", (a,), np.cos, lambda g, out, x: (-g * np.sin(x),))


def _sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    return _apply("sigmoid", (a,), _sigmoid, lambda g, out, x: (g * out * (1.0 - out),))


def relu(a):
    # subgradient at exactly 0 is 0
    return _apply("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))


def absolute(a):
    return _apply("abs", (a,), np.abs, lambda g, out, x: (g * np.sign(x),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    def compute(x, y):
        if x.ndim < 1 or y.ndim < 1 or x.shape[-1] != y.shape[-2 if y.ndim > 1 else 0]:
            raise ValueError("inner dimensions differ")
        return x @ y

    def vjps(g, out, x, y):
        if x.ndim == 2 and y.ndim == 2:
            return g @ y.T, x.T @ g
        gx = g @ np.swapaxes(y, -1, -2)
        gy = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _apply("matmul", (a, b), compute, vjps)


def transpose(a):
    return _apply("transpose", (a,), lambda x: x.T, lambda g, out, x: (g.T,))


def reshape(a, shape):
    return _apply("reshape", (a,), lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),))


def take(a, key):
    """Index with any numpy key; repeated indices accumulate in the backward pass."""

    def vjps(g, out, x):
        full = np.zeros_like(x)
        np.add.at(full, key, g)
        return (full,)

    return _apply("take", (a,), lambda x: x[key], vjps)


def concat(items: Sequence, axis: int = -1):
    def compute(*xs):
        return np.concatenate(xs, axis=axis)

    def vjps(g, out, *xs):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return _apply("concat", tuple(items), compute, vjps)


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    def vjps(g, out, x):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", (a,), lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjps)


def mean(a, axis=None, keepdims: bool = False):
    n = np.prod(np.shape(_as_array(a))) if axis is None else np.take(np.shape(_as_array(a)), axis).prod()
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def cumsum(a, axis: int = -1, exclusive: bool = False):
    """Running sum along ``axis``; ``exclusive`` drops each element's own term.

    The exclusive form shifts rather than subtracts, so an infinite entry does
    not poison its own prefix with ``inf - inf``.
    """

    def compute(x):
        c = np.cumsum(x, axis=axis)
        if not exclusive:
            return c
        c = np.roll(c, 1, axis=axis)
        idx = [slice(None)] * x.ndim
        idx[axis] = 0
        c[tuple(idx)] = 0.0
        return c

    def vjps(g, out, x):
        r = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        if exclusive:
            r = r - g
        return (r,)

    return _apply("cumsum", (a,), compute, vjps)


# ---------------------------------------------------------------- driver


def backward(output: Var, tape: Tape | None = None) -> GradientMap:
    """Gradient of a scalar ``output`` with respect to every parameter leaf.

    Raises:
        ValueError: if ``output`` is not a single-element value.
    """
    if not isinstance(output, Var):
        raise TypeError("backward needs a taped Var")
    tape = tape or output.tape
    if output.value.size != 1:
        raise ValueError(f"backward seed must be scalar, got shape {output.shape}")
    # collect the graph reachable from the output, then sweep it in reverse creation order
    reachable: dict[int, Var] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.index in reachable or not node.requires_grad:
            continue
        reachable[node.index] = node
        stack.extend(p for p in node.parents if p is not None)
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for idx in sorted(reachable, reverse=True):
        node = reachable[idx]
        if node.vjp is None:
            continue
        g = grads.pop(idx, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg
    out: GradientMap = {}
    for name, var in tape.params.items():
        g = grads.get(var.index)
        out[name] = np.zeros_like(var.value) if g is None else np.asarray(g).reshape(var.shape)
    return out


def forward(program: Callable[..., Mapping[str, Var]], inputs: Mapping, params: Mapping | None = None):
    """Run ``program`` on a fresh tape.

    ``inputs`` are bound as constants and ``params`` as differentiable leaves;
    both are passed to ``program`` as keyword arguments. Returns the tape and
    the program's named outputs (as ``Var``).
    """
    tape = Tape()
    bound = {k: tape.const(v, name=k) for k, v in inputs.items()}
    bound.update(tape.params_from(params or {}))
    outputs = program(**bound)
    return tape, dict(outputs)


def value(x) -> np.ndarray:
    """Raw array behind a ``Var`` (or the argument itself)."""
    return x.value if isinstance(x, Var) else np.asarray(x)
