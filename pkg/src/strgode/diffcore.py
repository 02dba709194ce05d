"""Dense reverse-mode differentiation on numpy arrays.

Graphs are built dynamically: every operation on a :class:`Tensor` that
depends on a differentiable input records its parents and a closure mapping
the output gradient to input gradients. ``backward`` walks the recorded
nodes in reverse topological order.

:class:`CompGraph` wraps a build function so the same computation can be
re-run from named bindings (``forward``), differentiated by leaf name
(``backward``) and checked against finite differences (``grad_check``).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands of a node have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or infinite values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    # a NaN or inf anywhere makes the sum non-finite
    if not math.isfinite(out.sum()):
        raise NonFiniteError(f"node '{op}' produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.name = None
    t.op = op
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out dimensions that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"node '{op}': cannot broadcast shapes {shapes}") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _node("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node("mul", ad * bd, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"node 'matmul': incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"node 'matmul': incompatible shapes {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node("matmul", out, (a, b), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"node 'concat': incompatible shapes {shapes} on axis {axis}") from exc
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node("concat", out, ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"node 'stack': incompatible shapes {[t.shape for t in ts]}") from exc
    n = len(ts)
    return _node("stack", out, ts, lambda g: tuple(np.moveaxis(g, axis, 0)[k] for k in range(n)))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node("sum_axis", a.data.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node("expand_dims", np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(shape),))


def take(a, index) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero array."""
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"node 'slice': bad index {index!r} for shape {a.shape}") from exc
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _node("slice", np.array(out, dtype=np.float64), (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at the kink
    return _node("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # stable in both tails
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _node("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node("sum", np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_abs(a, b=None) -> Tensor:
    """mean(|a - b|) as a scalar; ``b`` defaults to zero."""
    diff = as_tensor(a) if b is None else sub(a, b)
    sign = np.sign(diff.data)
    n = diff.data.size
    return _node("mean_abs", np.array(np.abs(diff.data).mean()), (diff,),
                 lambda g: (g * sign / n,))


# -- graph traversal -------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Differentiable nodes reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    wrt = list(wrt)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in wrt]


# -- named graphs ----------------------------------------------------------


BuildFn = Callable[[Mapping[str, Tensor]], Mapping[str, Tensor]]


class CompGraph:
    """A re-runnable computation over named leaves.

    ``build`` receives a mapping of leaf tensors and returns a mapping of
    named output nodes. The topology is rebuilt on every ``forward`` call, so
    data-dependent branching inside ``build`` is allowed.

    ``parameters`` lists the leaf names that are differentiated; ``None``
    means every binding.
    """

    def __init__(self, build: BuildFn, parameters: Sequence[str] | None = None):
        self.build = build
        self.parameters = None if parameters is None else list(parameters)
        self.leaves: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] = {}

    @property
    def nodes(self) -> list[Tensor]:
        """Differentiable nodes of the last forward pass in topological order."""
        seen: dict[int, Tensor] = {}
        for out in self.outputs.values():
            for node in topological_order(out):
                seen.setdefault(id(node), node)
        return list(seen.values())

    def param_names(self, bindings: Mapping[str, object]) -> list[str]:
        return list(bindings) if self.parameters is None else list(self.parameters)


def forward(graph: CompGraph, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    params = set(graph.param_names(bindings))
    missing = params - set(bindings)
    if missing:
        raise KeyError(f"unbound leaves: {sorted(missing)}")
    graph.leaves = {
        k: Tensor(np.array(v, dtype=np.float64), requires_grad=k in params, name=k)
        for k, v in bindings.items()
    }
    outputs = graph.build(graph.leaves)
    graph.outputs = {k: as_tensor(v) for k, v in outputs.items()}
    return {k: v.data.copy() for k, v in graph.outputs.items()}


def backward(graph: CompGraph, loss_node: str) -> dict[str, np.ndarray]:
    if loss_node not in graph.outputs:
        raise KeyError(f"no output named {loss_node!r}; run forward first")
    names = [k for k, t in graph.leaves.items() if t.requires_grad]
    grads = grad(graph.outputs[loss_node], [graph.leaves[k] for k in names])
    return dict(zip(names, grads))


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def grad_check(
    graph: CompGraph,
    bindings: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    loss_node: str = "loss",
) -> float:
    """Worst relative error between backprop and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    forward(graph, base)
    analytic = backward(graph, loss_node)

    def loss_at(name, flat_index, value):
        trial = dict(base)
        arr = base[name].copy()
        arr.flat[flat_index] = value
        trial[name] = arr
        return float(forward(graph, trial)[loss_node])

    worst = 0.0
    for name, g in analytic.items():
        x = base[name]
        for i in range(x.size):
            x0 = x.flat[i]
            numeric = (loss_at(name, i, x0 + epsilon) - loss_at(name, i, x0 - epsilon)) / (2 * epsilon)
            worst = max(worst, float(relative_error(g.flat[i], numeric)))
    return worst
