"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is itself written with :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is an ordinary node in the graph
and can be differentiated again. That is all the second-order machinery the
trainers need: differentiate a scalar loss through one recorded gradient step.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DomainError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class UnsupportedOpError(RuntimeError):
    pass


_GRAD_ENABLED = [True]
_GRAPH_STACK: list["Graph"] = []


@contextlib.contextmanager
def grad_mode(enabled: bool):
    _GRAD_ENABLED.append(bool(enabled))
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def no_grad():
    return grad_mode(False)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Op:
    """A differentiable primitive.

    ``forward`` maps input arrays to an output array. ``vjp`` receives the
    upstream gradient ``g`` (a Tensor), the output node and the input nodes and
    returns one Tensor (or None) per input.
    """

    name = "op"
    second_order = True

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, g: "Tensor", out: "Tensor", *inputs: "Tensor"):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Tensor:
    __slots__ = ("value", "op", "inputs", "requires_grad", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.array(value, dtype=np.float64)
        v.flags.writeable = False
        self.value = v
        self.op: Op | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _node(cls, value: np.ndarray, op: Op, inputs, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        value = np.asarray(value, dtype=np.float64)
        value.flags.writeable = False
        t.value = value
        t.op = op
        t.inputs = inputs
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.item())

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.op.name}" if self.op is not None else ""
        return f"Tensor(shape={self.shape}{op}{tag})"

    def __len__(self):
        return len(self.value)

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Graph:
    """Records every node created while active, in creation (topological) order.

    >>> with Graph() as g:
    ...     y = w * w
    >>> evaluate(g, [y], {w: np.array(4.0)})
    """

    def __init__(self, track_gradients: bool = True):
        self.nodes: list[Tensor] = []
        self.track_gradients = track_gradients
        self._mode = None

    def __enter__(self):
        _GRAPH_STACK.append(self)
        self._mode = grad_mode(self.track_gradients)
        self._mode.__enter__()
        return self

    def __exit__(self, *exc):
        self._mode.__exit__(*exc)
        _GRAPH_STACK.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def apply(op: Op, *inputs) -> Tensor:
    inputs = tuple(as_tensor(x) for x in inputs)
    value = op.forward(*(t.value for t in inputs))
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    recording = bool(_GRAPH_STACK)
    if requires or recording:
        out = Tensor._node(value, op, inputs, requires)
        if recording:
            _GRAPH_STACK[-1].nodes.append(out)
        return out
    return Tensor._node(value, None, (), False)


def evaluate(graph: Graph, outputs: Sequence[Tensor], feed: Mapping[Tensor, np.ndarray] | None = None) -> list[np.ndarray]:
    """Replay ``graph`` with leaf values optionally replaced through ``feed``."""
    values: dict[int, np.ndarray] = {}
    if feed:
        for leaf, v in feed.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != leaf.shape:
                raise ShapeError(f"feed for {leaf!r} has shape {v.shape}, expected {leaf.shape}")
            values[id(leaf)] = v
    for node in graph.nodes:
        args = [values.get(id(i), i.value) for i in node.inputs]
        values[id(node)] = node.op.forward(*args)
    return [values.get(id(o), o.value) for o in outputs]


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(root: Tensor, leaves: Iterable[Tensor], create_graph: bool = False, seed: Tensor | None = None) -> list[Tensor]:
    """Gradients of ``root`` with respect to ``leaves`` (zeros when unreachable)."""
    leaves = list(leaves)
    if seed is None:
        if root.size != 1:
            raise ShapeError(f"gradient needs a scalar loss, got shape {root.shape}")
        seed = Tensor(np.ones_like(root.value))
    wanted = {id(t) for t in leaves}
    found: dict[int, Tensor] = {}
    if root.requires_grad:
        grads: dict[int, Tensor] = {id(root): seed}
        with grad_mode(create_graph):
            for node in reversed(_topo_order(root)):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in wanted:
                    found[id(node)] = g
                if node.op is None:
                    continue
                if create_graph and not node.op.second_order:
                    raise UnsupportedOpError(f"op '{node.op.name}' has no second-derivative rule")
                in_grads = node.op.vjp(g, node, *node.inputs)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
    out = []
    for leaf in leaves:
        g = found.get(id(leaf))
        out.append(g if g is not None else Tensor(np.zeros(leaf.shape)))
    return out


def gradient(loss: Tensor, wrt: Mapping[str, Tensor], create_graph: bool = False) -> dict[str, Tensor]:
    names = list(wrt)
    grads = backward(loss, [wrt[k] for k in names], create_graph=create_graph)
    return dict(zip(names, grads))


def gradients(loss: Tensor, *paramsets: Mapping[str, Tensor], create_graph: bool = False) -> tuple[dict[str, Tensor], ...]:
    """One backward pass, gradients split per parameter set."""
    flat = [t for ps in paramsets for t in ps.values()]
    grads = iter(backward(loss, flat, create_graph=create_graph))
    return tuple({k: next(grads) for k in ps} for ps in paramsets)


# ---------------------------------------------------------------- parameters


class ParamSet(dict):
    """Named trainable leaves. Values are Tensors with ``requires_grad=True``."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        seen = set()
        for k, t in self.items():
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {k!r} is not a Tensor")
            if id(t) in seen:
                raise ValueError(f"leaf for {k!r} appears twice in the parameter set")
            seen.add(id(t))

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.value for k, t in self.items()}

    def fresh(self) -> "ParamSet":
        """New leaves holding the same values (no history)."""
        return ParamSet.from_arrays(self.arrays())

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(t.value) for k, t in self.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self.items()}

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(t.value))) if t.size else 0.0) for t in self.values())


# ---------------------------------------------------------------- hypergradient


def grad_through_update(
    inner_loss: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Tensor],
    outer_loss: Callable[[Mapping[str, Tensor], Mapping[str, Tensor]], Tensor],
    theta: ParamSet,
    phi: ParamSet,
    alpha: float,
    backend: str = "exact",
) -> dict[str, np.ndarray]:
    """d outer(theta, phi_plus(theta)) / d theta with phi_plus = phi + alpha * grad_phi inner.

    ``backend="exact"`` differentiates through the recorded inner gradient;
    ``backend="fd"`` replaces the mixed second derivative by a central
    difference of theta-gradients along v = grad_{phi_plus} outer.
    """
    theta = theta.fresh()
    phi = phi.fresh()
    if backend == "exact":
        inner = inner_loss(theta, phi)
        g_phi = gradient(inner, phi, create_graph=True)
        phi_plus = {k: phi[k] + alpha * g_phi[k] for k in phi}
        outer = outer_loss(theta, phi_plus)
        return {k: g.value for k, g in gradient(outer, theta).items()}
    if backend == "fd":
        g_phi = gradient(inner_loss(theta, phi), phi)
        phi_plus = ParamSet.from_arrays({k: phi[k].value + alpha * g_phi[k].value for k in phi})
        direct, v = gradients(outer_loss(theta, phi_plus), theta, phi_plus)
        r = 1e-4 * (1.0 + phi.max_abs())
        shifted = []
        for sign in (1.0, -1.0):
            ph = ParamSet.from_arrays({k: phi[k].value + sign * r * v[k].value for k in phi})
            th = theta.fresh()
            shifted.append(gradient(inner_loss(th, ph), th))
        gp, gm = shifted
        return {k: direct[k].value + alpha * (gp[k].value - gm[k].value) / (2.0 * r) for k in theta}
    raise ValueError(f"unknown backend {backend!r}; use 'exact' or 'fd'")


# ---------------------------------------------------------------- primitives


def _reduce_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


class Add(Op):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        return a + b

    def vjp(self, g, out, a, b):
        return sum_to(g, a.shape), sum_to(g, b.shape)


class Sub(Op):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        return a - b

    def vjp(self, g, out, a, b):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)


class Mul(Op):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        return a * b

    def vjp(self, g, out, a, b):
        return sum_to(g * b, a.shape), sum_to(g * a, b.shape)


class Div(Op):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(a, b, self.name)
        return a / b

    def vjp(self, g, out, a, b):
        return sum_to(g / b, a.shape), sum_to(neg(g * out / b), b.shape)


class Neg(Op):
    name = "neg"

    def forward(self, a):
        return -a

    def vjp(self, g, out, a):
        return (neg(g),)


class MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        return a @ b

    def vjp(self, g, out, a, b):
        return matmul(g, transpose(b)), matmul(transpose(a), g)


class Transpose(Op):
    name = "transpose"

    def forward(self, a):
        return a.T

    def vjp(self, g, out, a):
        return (transpose(g),)


class Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def vjp(self, g, out, a):
        return (g * out,)


class Log(Op):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise DomainError("log of non-positive input")
        return np.log(a)

    def vjp(self, g, out, a):
        return (g / a,)


class Sqrt(Op):
    name = "sqrt"

    def forward(self, a):
        if np.any(a < 0):
            raise DomainError("sqrt of negative input")
        return np.sqrt(a)

    def vjp(self, g, out, a):
        return (g * 0.5 / out,)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, a):
        return _sigmoid(a)

    def vjp(self, g, out, a):
        return (g * out * (1.0 - out),)


class Softplus(Op):
    name = "softplus"

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def vjp(self, g, out, a):
        return (g * sigmoid(a),)


class Relu(Op):
    name = "relu"

    def forward(self, a):
        return np.maximum(a, 0.0)

    def vjp(self, g, out, a):
        # second derivative is zero almost everywhere
        return (g * Tensor((a.value > 0).astype(np.float64)),)


class Power(Op):
    name = "power"

    def __init__(self, p: float):
        self.p = float(p)

    def forward(self, a):
        if self.p != int(self.p) and np.any(a < 0):
            raise DomainError("fractional power of negative input")
        return a ** self.p

    def vjp(self, g, out, a):
        if self.p == 2.0:
            return (g * (2.0 * a),)
        return (g * (self.p * power(a, self.p - 1.0)),)


class Sum(Op):
    name = "sum"

    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def vjp(self, g, out, a):
        if not self.keepdims and self.axis is not None:
            axes = (self.axis,) if isinstance(self.axis, int) else tuple(self.axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = reshape(g, kept)
        elif not self.keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)


class BroadcastTo(Op):
    name = "broadcast_to"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return np.broadcast_to(a, self.shape).copy()
        except ValueError:
            raise ShapeError(f"cannot broadcast {a.shape} to {self.shape}") from None

    def vjp(self, g, out, a):
        return (sum_to(g, a.shape),)


class SumTo(Op):
    name = "sum_to"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        return _reduce_to(a, self.shape)

    def vjp(self, g, out, a):
        return (broadcast_to(g, a.shape),)


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a):
        try:
            return a.reshape(self.shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} to {self.shape}") from None

    def vjp(self, g, out, a):
        return (reshape(g, a.shape),)


class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, a):
        m = np.max(a, axis=-1, keepdims=True)
        return a - m - np.log(np.sum(np.exp(a - m), axis=-1, keepdims=True))

    def vjp(self, g, out, a):
        return (g - exp(out) * reduce_sum(g, -1, keepdims=True),)


class Take(Op):
    name = "take"

    def __init__(self, index, axis):
        self.index = np.asarray(index, dtype=np.int64)
        self.axis = axis

    def forward(self, a):
        n = a.shape[self.axis]
        if self.index.size and (self.index.min() < 0 or self.index.max() >= n):
            raise IndexError(f"take: index out of range for axis of length {n}")
        return np.take(a, self.index, axis=self.axis)

    def vjp(self, g, out, a):
        return (scatter(g, self.index, self.axis, a.shape[self.axis]),)


class Scatter(Op):
    name = "scatter"

    def __init__(self, index, axis, size):
        self.index = np.asarray(index, dtype=np.int64)
        self.axis = axis
        self.size = size

    def forward(self, a):
        shape = list(a.shape)
        shape[self.axis] = self.size
        out = np.zeros(shape)
        moved = np.moveaxis(out, self.axis, 0)
        np.add.at(moved, self.index, np.moveaxis(a, self.axis, 0))
        return out

    def vjp(self, g, out, a):
        return (take(g, self.index, self.axis),)


class Amax(Op):
    """Max reduction; first-order rule only (argmax mask treated as constant)."""

    name = "amax"
    second_order = False

    def __init__(self, axis=None):
        self.axis = axis

    def forward(self, a):
        return np.max(a, axis=self.axis)

    def vjp(self, g, out, a):
        full = np.max(a.value, axis=self.axis, keepdims=True)
        mask = (a.value == full).astype(np.float64)
        mask /= mask.sum(axis=self.axis, keepdims=True)
        gv = g.value if self.axis is None else np.expand_dims(g.value, self.axis)
        return (Tensor(mask * gv),)


def add(a, b):
    return apply(Add(), a, b)


def sub(a, b):
    return apply(Sub(), a, b)


def mul(a, b):
    return apply(Mul(), a, b)


def div(a, b):
    return apply(Div(), a, b)


def neg(a):
    return apply(Neg(), a)


def matmul(a, b):
    return apply(MatMul(), a, b)


def transpose(a):
    return apply(Transpose(), a)


def exp(a):
    return apply(Exp(), a)


def log(a):
    return apply(Log(), a)


def sqrt(a):
    return apply(Sqrt(), a)


def sigmoid(a):
    return apply(Sigmoid(), a)


def softplus(a):
    return apply(Softplus(), a)


def relu(a):
    return apply(Relu(), a)


def square(a):
    return apply(Power(2), a)


def power(a, p):
    return apply(Power(p), a)


def reduce_sum(a, axis=None, keepdims=False):
    return apply(Sum(axis, keepdims), a)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return reduce_sum(a, axis, keepdims) * (1.0 / n)


def broadcast_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(BroadcastTo(shape), a)


def sum_to(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(SumTo(shape), a)


def reshape(a, shape):
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return apply(Reshape(shape), a)


def log_softmax(a):
    return apply(LogSoftmax(), a)


def take(a, index, axis=0):
    return apply(Take(index, axis), a)


def scatter(a, index, axis, size):
    return apply(Scatter(index, axis, size), a)


def amax(a, axis=None):
    return apply(Amax(axis), a)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label out of range [0, {n_classes})")
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Negative log-softmax at the label; per row for 2-D logits."""
    logits = as_tensor(logits)
    onehot = one_hot(labels, logits.shape[-1])
    if onehot.shape != logits.shape:
        raise ShapeError(f"labels {np.shape(labels)} do not match logits {logits.shape}")
    return neg(reduce_sum(log_softmax(logits) * onehot, axis=-1))
