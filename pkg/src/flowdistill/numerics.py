"""Dense float64 arithmetic with a dynamic reverse-mode tape.

Values are plain ``numpy.ndarray`` objects in float64. A :class:`Node` wraps a
value together with the local backward rule that produced it; calling
:func:`backward` on a scalar node walks the recorded graph in reverse
topological order and accumulates ``grad`` on every node that requires it.

Backward rules operate on raw arrays only, so the tape never records a
derivative of a derivative. :func:`count_higher_order_nodes` checks this
structurally.
"""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

Tensor = np.ndarray

FIRST_ORDER_OPS = frozenset({
    "leaf", "const", "add", "sub", "mul", "neg", "scale", "matmul", "tanh",
    "silu", "square", "sum", "mean", "concat", "slice", "take_rows",
    "layer_norm", "reshape", "broadcast_rows",
})

_GRAD_ENABLED = True
_BACKWARD_DEPTH = 0
_NODES_CREATED_IN_BACKWARD = 0


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def _check_finite(value: Tensor, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by '{op}'")
    return value


class Node:
    __slots__ = ("value", "parents", "backward_rule", "_grad", "requires_grad",
                 "op", "name", "order", "detached_from")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_rule=None,
                 op: str = "leaf", requires_grad: bool = False, name: str | None = None):
        global _NODES_CREATED_IN_BACKWARD
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self._grad = None
        self.op = op
        self.name = name
        self.detached_from = None
        self.order = 1
        if _BACKWARD_DEPTH > 0:
            self.order = 2
            _NODES_CREATED_IN_BACKWARD += 1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value: Tensor) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, op="leaf", requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording backward rules."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _make(value: Tensor, parents: Sequence[Node], rule, op: str) -> Node:
    _check_finite(value, op)
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not track:
        return Node(value, op=op)
    return Node(value, parents, rule, op=op, requires_grad=True)


def _unbroadcast(grad: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- binary ops -------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "sub")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def neg(a) -> Node:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def scale(a, k: float) -> Node:
    a = _lift(a)
    k = float(k)
    return _make(a.value * k, (a,), lambda g: (g * k,), "scale")


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


# -- unary ops --------------------------------------------------------------

def tanh(a) -> Node:
    a = _lift(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a) -> Node:
    a = _lift(a)
    x = a.value
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def square(a) -> Node:
    a = _lift(a)
    x = a.value
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    shape = a.shape

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis), (a,), rule, "sum")


def mean(a, axis: int | None = None) -> Node:
    a = _lift(a)
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.mean(a.value, axis=axis), (a,), rule, "mean")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [_lift(n) for n in nodes]
    values = [n.value for n in nodes]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    splits = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def slice_cols(a, start: int, stop: int) -> Node:
    """Columns ``start:stop`` of a 2-D node."""
    a = _lift(a)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.value[:, start:stop], (a,), rule, "slice")


def take_rows(table, index) -> Node:
    """Gather rows of a 2-D table; repeated indices accumulate gradient."""
    table = _lift(table)
    index = np.asarray(index, dtype=np.intp)
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(table.value[index], (table,), rule, "take_rows")


def reshape(a, shape: tuple[int, ...]) -> Node:
    a = _lift(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def layer_norm(a, eps: float = 1e-5) -> Node:
    """Row-wise normalization to zero mean, unit variance, no affine part."""
    a = _lift(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), rule, "layer_norm")


def stop_gradient(a) -> Node:
    """Value identity that blocks gradient flow into ``a``'s subgraph."""
    a = _lift(a)
    out = Node(a.value.copy(), op="stop_gradient")
    out.detached_from = a
    return out


# -- graph traversal --------------------------------------------------------

def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def iter_graph(root: Node) -> list[Node]:
    """All nodes reachable from ``root``, including detached subgraphs."""
    found: list[Node] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        found.append(node)
        stack.extend(node.parents)
        if node.detached_from is not None:
            stack.append(node.detached_from)
    return found


def count_higher_order_nodes(root: Node) -> int:
    """Number of nodes in the graph that are not plain first-order ops."""
    bad = 0
    for node in iter_graph(root):
        if node.order > 1:
            bad += 1
        elif node.op not in FIRST_ORDER_OPS and node.op != "stop_gradient":
            bad += 1
    return bad + _NODES_CREATED_IN_BACKWARD


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every tracked node."""
    global _BACKWARD_DEPTH
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        if node is not root and node.backward_rule is not None:
            node.zero_grad()
    root.grad = np.ones_like(root.value)
    _BACKWARD_DEPTH += 1
    try:
        for node in reversed(order):
            if node.backward_rule is None:
                continue
            grads = node.backward_rule(node.grad)
            for parent, g in zip(node.parents, grads):
                if parent.requires_grad:
                    parent._grad = g if parent._grad is None else parent._grad + g
    finally:
        _BACKWARD_DEPTH -= 1


# -- parameters and optimization --------------------------------------------

class ParamStore:
    """Ordered collection of named trainable parameters."""

    def __init__(self):
        self.params: OrderedDict[str, Node] = OrderedDict()
        self.step = 0
        self.moments: dict[str, tuple[Tensor, Tensor]] = {}

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value, name=name)
        self.params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def total_param_count(self) -> int:
        return int(np.sum([node.value.size for node in self.params.values()], dtype=np.int64))

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def snapshot(self) -> dict[str, Tensor]:
        return {name: node.value.copy() for name, node in self.params.items()}

    def load(self, values: dict[str, Tensor]) -> None:
        for name, node in self.params.items():
            v = as_tensor(values[name])
            if v.shape != node.shape:
                raise ShapeError(f"{name}: expected shape {node.shape}, got {v.shape}")
            node.value = v.copy()
            node.zero_grad()


def adam_step(store: ParamStore, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One AdamW update from the grads currently held by ``store``; zeroes grads."""
    b1, b2 = betas
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    for name, node in store.params.items():
        g = node.grad
        m, v = store.moments.get(name, (np.zeros_like(g), np.zeros_like(g)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        store.moments[name] = (m, v)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * node.value
        node.value = _check_finite(node.value - lr * update, "adam_step")
        node.zero_grad()


def finite_diff_check(loss_fn: Callable[[], Node], store: ParamStore, h: float = 1e-5,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values and be
    deterministic; two evaluations that disagree raise ``RuntimeError``.
    """
    first = loss_fn()
    with no_grad():
        second = loss_fn()
    if not np.array_equal(first.value, second.value):
        raise RuntimeError("loss_fn is not deterministic: repeated evaluation differs")
    store.zero_grad()
    backward(first)
    worst = 0.0
    for name in (names if names is not None else store.names()):
        node = store[name]
        analytic = node.grad.copy()
        flat = node.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            with no_grad():
                up = float(loss_fn().value)
            flat[i] = original - h
            with no_grad():
                down = float(loss_fn().value)
            flat[i] = original
            numeric = (up - down) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    store.zero_grad()
    return worst
