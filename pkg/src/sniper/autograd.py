"""Minimal reverse-mode automatic differentiation over a fixed op set.

Graphs are built explicitly from :class:`Node` objects and run in two
passes: :func:`evaluate` computes and caches forward values, :func:`backward`
propagates gradients from a scalar root back to every leaf.  Values are
float64 numpy arrays throughout.

Mask participation is expressed with an ordinary elementwise ``mul`` node,
so the gradient with respect to a mask leaf comes out of the same backward
pass as weight gradients.

Example:
    >>> w = parameter([[1.5]], name="w")
    >>> x = constant([[1.0]])
    >>> loss = mse_loss(matmul(x, w), constant([[0.0]]))
    >>> float(evaluate(loss))
    2.25
    >>> float(backward(loss)[w][0, 0])
    3.0
"""

from __future__ import annotations

import itertools
import math
from typing import Iterable, Sequence

import numpy as np

OP_KINDS = ("matmul", "add", "relu", "tanh", "mul", "mse_loss", "constant", "parameter")

_ids = itertools.count()


class GraphError(RuntimeError):
    """Raised for misuse of a graph, e.g. backward on a stale evaluation."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        shape_txt = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"shape mismatch in {op}: {shape_txt}")


def as_tensor(value) -> np.ndarray:
    """Return ``value`` as a C-contiguous float64 array (copying lists, not arrays)."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


class Node:
    """One vertex of a computation graph.

    Leaves are ``constant`` or ``parameter`` nodes and own their value.  All
    other nodes derive their value in :func:`evaluate`.  ``grad`` is filled by
    :func:`backward` and always matches ``value`` in shape.
    """

    __slots__ = ("op", "inputs", "name", "attrs", "value", "grad", "_id", "_version", "_stamp")

    def __init__(self, op: str, inputs: Sequence["Node"] = (), value=None, name: str | None = None, **attrs):
        if op not in OP_KINDS:
            raise ValueError(f"unknown op kind {op!r}")
        self.op = op
        self.inputs = tuple(inputs)
        self.name = name
        self.attrs = attrs
        self.value = None if value is None else as_tensor(value)
        self.grad = None
        self._id = next(_ids)
        self._version = 0
        self._stamp = None

    @property
    def is_leaf(self) -> bool:
        return self.op in ("constant", "parameter")

    def set_value(self, value) -> None:
        """Replace a leaf's value; any earlier evaluation becomes stale."""
        if not self.is_leaf:
            raise GraphError(f"cannot assign a value to derived node ({self.op})")
        self.value = as_tensor(value)
        self._version += 1

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={shape})"

    def __hash__(self):
        return self._id

    def __eq__(self, other):
        return self is other


def constant(value, name: str | None = None) -> Node:
    return Node("constant", value=value, name=name)


def parameter(value, name: str | None = None) -> Node:
    return Node("parameter", value=value, name=name)


def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    """2-D matrix product ``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    return Node("matmul", (a, b), transpose_b=transpose_b)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a 1-D bias matching ``a``'s last axis."""
    return Node("add", (a, b))


def relu(a: Node) -> Node:
    return Node("relu", (a,))


def tanh(a: Node) -> Node:
    return Node("tanh", (a,))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of two same-shape operands."""
    return Node("mul", (a, b))


def mse_loss(pred: Node, target: Node) -> Node:
    """Mean of squared differences over all entries; a 0-d result."""
    return Node("mse_loss", (pred, target))


def topological_order(root: Node) -> list[Node]:
    """Inputs-before-outputs ordering of every node reachable from ``root``."""
    order: list[Node] = []
    seen: set[int] = set()
    on_path: set[int] = set()
    # iterative DFS; graphs from deep MLPs would otherwise hit recursion limits
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_path.discard(node._id)
            order.append(node)
            continue
        if node._id in seen:
            if node._id in on_path:
                raise GraphError("graph contains a cycle")
            continue
        seen.add(node._id)
        on_path.add(node._id)
        stack.append((node, True))
        for child in reversed(node.inputs):
            if child._id in on_path:
                raise GraphError("graph contains a cycle")
            if child._id not in seen:
                stack.append((child, False))
    return order


def leaves(root: Node, op: str | None = None) -> list[Node]:
    """Leaf nodes under ``root`` in evaluation order, optionally filtered by op kind."""
    return [n for n in topological_order(root) if n.is_leaf and (op is None or n.op == op)]


def _forward(node: Node) -> np.ndarray:
    vals = [n.value for n in node.inputs]
    op = node.op
    if op == "matmul":
        a, b = vals
        if node.attrs.get("transpose_b"):
            b = b.T
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(op, vals[0].shape, vals[1].shape)
        return a @ b
    if op == "add":
        a, b = vals
        if a.shape != b.shape and not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
            raise ShapeError(op, a.shape, b.shape)
        return a + b
    if op == "mul":
        a, b = vals
        if a.shape != b.shape:
            raise ShapeError(op, a.shape, b.shape)
        return a * b
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "mse_loss":
        pred, target = vals
        if pred.shape != target.shape:
            raise ShapeError(op, pred.shape, target.shape)
        diff = pred - target
        return np.asarray(np.mean(diff * diff))
    raise AssertionError(op)


def _local_grads(node: Node, g: np.ndarray) -> list[np.ndarray]:
    vals = [n.value for n in node.inputs]
    op = node.op
    if op == "matmul":
        a, b = vals
        if node.attrs.get("transpose_b"):
            return [g @ b, g.T @ a]
        return [g @ b.T, a.T @ g]
    if op == "add":
        a, b = vals
        gb = g if b.shape == a.shape else g.reshape(-1, b.shape[0]).sum(axis=0)
        return [g, gb]
    if op == "mul":
        a, b = vals
        return [g * b, g * a]
    if op == "relu":
        return [g * (vals[0] > 0.0)]
    if op == "tanh":
        t = node.value
        return [g * (1.0 - t * t)]
    if op == "mse_loss":
        pred, target = vals
        d = (2.0 / pred.size) * (pred - target) * g
        return [d, -d]
    raise AssertionError(op)


def evaluate(root: Node) -> np.ndarray:
    """Run the forward pass and return the root value.

    Per-node values are cached on the nodes so that :func:`backward` can
    reuse them.  Raises :class:`ShapeError` naming the op and both operand
    shapes on incompatible inputs.
    """
    order = topological_order(root)
    for node in order:
        if node.is_leaf:
            if node.value is None:
                raise GraphError(f"leaf {node.name or node.op} has no value")
            continue
        out = _forward(node)
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite value produced by {node.op}")
        node.value = out
        node.grad = None
    root._stamp = tuple((n._id, n._version) for n in order if n.is_leaf)
    return root.value


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Propagate d(root)/d(node) to every node; return grads of parameter leaves.

    ``root`` must be a single-entry (normally 0-d) value produced by
    :func:`evaluate` with no leaf changed since.
    """
    order = topological_order(root)
    stamp = tuple((n._id, n._version) for n in order if n.is_leaf)
    if root._stamp is None or root._stamp != stamp:
        raise GraphError("stale graph: evaluate() must run before backward()")
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.is_leaf:
            continue
        for child, g in zip(node.inputs, _local_grads(node, node.grad)):
            if child.op == "constant":
                continue
            child.grad = child.grad + g
    return {n: n.grad for n in order if n.op == "parameter"}


def finite_diff_gradient(root: Node, leaf: Node, index, epsilon: float = 1e-6) -> float:
    """Central-difference estimate of d(root)/d(leaf[index]).

    The leaf value is restored (bitwise) before returning.  Used as the
    independent oracle for :func:`backward`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if leaf not in topological_order(root):
        return 0.0
    original = leaf.value.copy()
    try:
        bumped = original.copy()
        bumped[index] = original[index] + epsilon
        leaf.set_value(bumped)
        up = float(evaluate(root))
        bumped[index] = original[index] - epsilon
        leaf.set_value(bumped)
        down = float(evaluate(root))
    finally:
        leaf.set_value(original)
    evaluate(root)
    return (up - down) / (2.0 * epsilon)


def _fans(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Iterable[int], seed) -> np.ndarray:
    """Glorot-uniform sample: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).

    For 2-D ``(out, in)`` shapes fan_in is ``in``.  ``seed`` may be an int or a
    ``numpy.random.SeedSequence``; equal seeds give bitwise-equal tensors.
    """
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ValueError("xavier_init needs at least one dimension")
    if any(d <= 0 for d in shape):
        raise ValueError(f"xavier_init got a non-positive dimension in {shape}")
    fan_in, fan_out = _fans(shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape)
