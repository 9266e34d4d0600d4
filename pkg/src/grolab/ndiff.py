"""Minimal reverse-mode differentiation over dense float64 arrays.

The op set is intentionally small: arithmetic, matrix products, row
gathering, a few elementwise nonlinearities, softmax, softmax
cross-entropy, and reductions. That is everything the sequence models
and the ranking losses in this package need. All values are float64.

A computation graph is a DAG of :class:`Node` objects. ``backward``
seeds the (scalar) root with gradient 1 and accumulates vector-Jacobian
products into every reachable node, so leaf gradients can be read off
directly. ``finite_difference_gradient`` and ``grad_check`` provide the
independent oracle used to validate every op.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class GraphError(ValueError):
    """Structural problem with a computation graph (cycle, bad root)."""


class NonFiniteError(ValueError):
    """A function produced nan/inf where a finite value was required."""


class Node:
    """One value in a computation graph.

    ``parents`` holds ``(parent, vjp)`` pairs; ``vjp`` maps this node's
    output gradient to the contribution to the parent's gradient.
    ``hinge_input``, set only by ``relu``, records the pre-activation so
    gradient checks can detect kink crossings.
    """

    __slots__ = ("value", "grad", "parents", "hinge_input")

    def __init__(self, value, parents: Sequence[tuple["Node", Callable]] = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.hinge_input: np.ndarray | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def leaf(value) -> Node:
    """Wrap an array as a graph leaf (parameters, constants, inputs)."""
    return Node(value)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    out = a.value + b.value
    return Node(out, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ])


def sub(a: Node, b: Node) -> Node:
    out = a.value - b.value
    return Node(out, [
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ])


def mul(a: Node, b: Node) -> Node:
    """Elementwise (broadcasting) product."""
    out = a.value * b.value
    return Node(out, [
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ])


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return Node(a.value * c, [(a, lambda g: g * c)])


def add_const(a: Node, c) -> Node:
    return Node(a.value + np.asarray(c, dtype=np.float64), [(a, lambda g: g)])


def matmul(a: Node, b: Node) -> Node:
    """Matrix-matrix or matrix-vector product (1-D operands allowed)."""
    out = a.value @ b.value

    def grad_a(g):
        if a.value.ndim == 1:  # (m,) @ (m,k)
            return g @ b.value.T if b.value.ndim == 2 else g * b.value
        if b.value.ndim == 1:  # (n,m) @ (m,)
            return np.outer(g, b.value)
        return g @ b.value.T

    def grad_b(g):
        if b.value.ndim == 1:
            return a.value.T @ g if a.value.ndim == 2 else g * a.value
        if a.value.ndim == 1:
            return np.outer(a.value, g)
        return a.value.T @ g

    return Node(out, [(a, grad_a), (b, grad_b)])


def transpose(a: Node) -> Node:
    return Node(a.value.T, [(a, lambda g: g.T)])


def reshape(a: Node, shape: tuple) -> Node:
    orig = a.value.shape
    return Node(a.value.reshape(shape), [(a, lambda g: g.reshape(orig))])


def gather_rows(a: Node, idx) -> Node:
    """Take rows (2-D) or elements (1-D) at ``idx`` along axis 0."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.value[idx]

    def grad_a(g):
        acc = np.zeros_like(a.value)
        np.add.at(acc, idx, g)
        return acc

    return Node(out, [(a, grad_a)])


def row(a: Node, i: int) -> Node:
    """Single row of a 2-D node as a 1-D vector."""
    i = int(i)
    out = a.value[i]

    def grad_a(g):
        acc = np.zeros_like(a.value)
        acc[i] = g
        return acc

    return Node(out, [(a, grad_a)])


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(k):
        lo, hi = offsets[k], offsets[k + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Node(out, [(n, make_vjp(k)) for k, n in enumerate(nodes)])


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return Node(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a: Node) -> Node:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Node(out, [(a, lambda g: g * out * (1.0 - out))])


def relu(a: Node) -> Node:
    """max(x, 0). Subgradient at exactly 0 is 0 (strict inequality below)."""
    out = np.maximum(a.value, 0.0)
    node = Node(out, [(a, lambda g: g * (a.value > 0.0))])
    node.hinge_input = a.value
    return node


def softmax(a: Node) -> Node:
    """Softmax over the last axis (1-D vector or rows of a matrix)."""
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_a(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (g - dot) * out

    return Node(out, [(a, grad_a)])


def softmax_cross_entropy(logits: Node, targets, reduction: str = "mean") -> Node:
    """Cross-entropy of softmax(logits) against integer class targets.

    ``logits`` is 1-D (single prediction, int target) or 2-D (one row per
    prediction, 1-D int targets). Returns a scalar; ``reduction`` is
    ``"mean"`` or ``"sum"`` over rows.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    squeeze = logits.value.ndim == 1
    vals = logits.value[None, :] if squeeze else logits.value
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.intp))
    if tgt.shape[0] != vals.shape[0]:
        raise ValueError("one target per logits row required")
    shifted = vals - vals.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + vals.max(axis=1)
    losses = lse - vals[np.arange(vals.shape[0]), tgt]
    n = vals.shape[0]
    out = losses.mean() if reduction == "mean" else losses.sum()
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)

    def grad_logits(g):
        grad = probs.copy()
        grad[np.arange(n), tgt] -= 1.0
        if reduction == "mean":
            grad /= n
        grad = grad * g
        return grad[0] if squeeze else grad

    return Node(out, [(logits, grad_logits)])


def nsum(a: Node) -> Node:
    shape = a.value.shape
    return Node(a.value.sum(), [(a, lambda g: np.broadcast_to(g, shape).copy())])


def nmean(a: Node) -> Node:
    shape = a.value.shape
    n = a.value.size
    return Node(a.value.mean(), [(a, lambda g: np.broadcast_to(g / n, shape).copy())])


def _toposort(root: Node) -> list[Node]:
    """Iterative DFS postorder with cycle detection."""
    order: list[Node] = []
    state: dict[int, int] = {}  # id -> 1 on stack, 2 done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, pi = stack[-1]
        if pi == 0:
            st = state.get(id(node))
            if st == 1:
                raise GraphError("cycle detected in computation graph")
            if st == 2:
                stack.pop()
                continue
            state[id(node)] = 1
        if pi < len(node.parents):
            stack[-1] = (node, pi + 1)
            parent = node.parents[pi][0]
            if state.get(id(parent)) != 2:
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
            stack.pop()
    return order


def reachable_nodes(root: Node) -> list[Node]:
    """Every node contributing to ``root``, in topological order."""
    return _toposort(root)


def backward(root: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar root.

    Repeated calls accumulate (gradients are never implicitly reset), so
    the gradient of a sum of losses can be built up loss by loss.
    """
    if root.value.ndim != 0:
        raise GraphError("backward requires a scalar root")
    order = _toposort(root)
    root.grad = root.grad + 1.0
    grads: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = np.array(contrib, dtype=np.float64, copy=True)
    for node in order:
        if node is root:
            continue
        g = grads.get(id(node))
        if g is not None:
            node.grad = node.grad + g


def collect_hinge_inputs(root: Node) -> list[np.ndarray]:
    """Pre-activation values of every hinge (relu) in the graph, in
    deterministic traversal order. Used for kink detection."""
    return [n.hinge_input for n in _toposort(root) if n.hinge_input is not None]


def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               point: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    for i in range(point.size):
        xp = point.copy()
        xm = point.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        fp = float(f(xp))
        fm = float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value at coordinate {i}")
        grad.flat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_coordinate: int
    passed: bool
    excluded: tuple[int, ...] = ()
    compared: int = 0


def _hinge_flat(root: Node) -> np.ndarray:
    arrays = collect_hinge_inputs(root)
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def grad_check(build: Callable[[Node], Node], point: np.ndarray, h: float,
               tol: float, abs_tol: float) -> GradCheckReport:
    """Compare backward-mode gradients against central differences.

    ``build`` maps a leaf node for ``point`` to a scalar root node.
    Coordinates whose perturbation crosses a hinge kink, or that sit
    within ``10*h`` of one, are excluded from the comparison: a central
    difference straddling a kink does not estimate either subgradient.
    Passes when max relative error <= tol or max absolute error <=
    abs_tol over the compared coordinates.
    """
    point = np.asarray(point, dtype=np.float64)
    x = leaf(point)
    root = build(x)
    if root.value.ndim != 0:
        raise GraphError("grad_check requires a scalar-valued build")
    backward(root)
    analytic = x.grad.copy()
    center_hinges = _hinge_flat(root)

    fd = np.zeros_like(point)
    excluded: list[int] = []
    for i in range(point.size):
        xp = point.copy()
        xm = point.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        root_p = build(leaf(xp))
        root_m = build(leaf(xm))
        fp, fm = float(root_p.value), float(root_m.value)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value at coordinate {i}")
        fd.flat[i] = (fp - fm) / (2.0 * h)
        hp = _hinge_flat(root_p)
        hm = _hinge_flat(root_m)
        if hp.size:
            flipped = (hp > 0.0) != (hm > 0.0)
            moved = hp != hm
            near = np.abs(center_hinges) < 10.0 * h
            if np.any(flipped) or np.any(moved & near):
                excluded.append(i)

    mask = np.ones(point.size, dtype=bool)
    mask[excluded] = False
    max_rel = 0.0
    max_abs = 0.0
    worst = -1
    for i in np.nonzero(mask)[0]:
        a, b = analytic.flat[i], fd.flat[i]
        abs_err = abs(a - b)
        denom = max(abs(a), abs(b))
        rel_err = abs_err / denom if denom > abs_tol else 0.0
        if rel_err > max_rel or (rel_err == max_rel and abs_err > max_abs):
            max_rel, worst = rel_err, int(i)
        max_abs = max(max_abs, abs_err)
    passed = (max_rel <= tol) or (max_abs <= abs_tol)
    return GradCheckReport(max_rel, max_abs, worst, passed,
                           tuple(excluded), int(mask.sum()))
