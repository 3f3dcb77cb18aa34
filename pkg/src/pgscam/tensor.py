"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the handful of operations the segmentation network and the saliency
pipeline need are provided. Every operation returns a new :class:`Tensor`
whose ``node`` records the inputs and the backward rule. :func:`backward`
collects the ancestors of a scalar objective into a :class:`Graph`, ordered by
creation, and walks it in reverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()

# Test hook used by the gradient-check CLI: op name -> multiplier applied to
# the gradients that op's backward rule emits.
FAULTS: dict[str, float] = {}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised on misuse of the computation graph (e.g. non-scalar backward)."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # branch decisions of piecewise ops (ReLU masks, max selections)
    pattern: np.ndarray | None = None


class Tensor:
    """Dense float64 array with an optional gradient buffer and graph link."""

    __slots__ = ("values", "grad", "node", "requires_grad", "id")

    def __init__(self, values, requires_grad: bool = False, node: Node | None = None):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.grad: np.ndarray | None = None
        self.node = node
        self.requires_grad = requires_grad or node is not None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        op = self.node.op if self.node else "leaf"
        return f"Tensor(shape={self.shape}, op={op})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _make(values: np.ndarray, op: str, inputs: tuple[Tensor, ...], rule, pattern=None) -> Tensor:
    if not any(t.requires_grad for t in inputs):
        return Tensor(values)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = True
    out.id = next(_ids)
    out.node = Node(op, inputs, rule, pattern)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.values, b.values

    def rule(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, "matmul", (a, b), rule)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0.0

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, x.values, 0.0), "relu", (x,), rule, mask)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    x, b = _as_tensor(x), _as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")

    def rule(g):
        return g, g.sum(axis=0)

    return _make(x.values + b.values, "add_bias", (x, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def rule(g):
        return g, g

    return _make(a.values + b.values, "add", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, B = a.values, b.values

    def rule(g):
        return g * B, g * A

    return _make(A * B, "mul", (a, b), rule)


def scale(x: Tensor, alpha: float) -> Tensor:
    x = _as_tensor(x)

    def rule(g):
        return (g * alpha,)

    return _make(x.values * alpha, "scale", (x,), rule)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    shape = x.shape

    def rule(g):
        return (np.full(shape, float(g)),)

    return _make(np.array(x.values.sum()), "total", (x,), rule)


def column(x: Tensor, c: int) -> Tensor:
    x = _as_tensor(x)
    if x.values.ndim != 2 or not 0 <= c < x.shape[1]:
        raise ShapeError(f"column: index {c} invalid for shape {x.shape}")
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        out[:, c] = g
        return (out,)

    return _make(x.values[:, c].copy(), "column", (x,), rule)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the channel (column) axis."""
    parts = tuple(_as_tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.values.ndim != 2 for p in parts):
        raise ShapeError(f"concat: row counts differ: {[p.shape for p in parts]}")
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([p.values for p in parts], axis=1), "concat", parts, rule)


def gather_rows(x: Tensor, idx) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    m = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= m):
        raise IndexError(f"gather_rows: index out of range for {m} rows")
    shape = x.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.values[idx], "gather_rows", (x,), rule)


def _neighbor_array(neighbors, m: int) -> np.ndarray:
    """Rectangular, row-sorted neighbor index array; short rows are padded
    with their own smallest index (duplicates do not change a max)."""
    if isinstance(neighbors, np.ndarray) and neighbors.ndim == 2:
        if neighbors.shape[1] == 0:
            raise ValueError("neighborhood_max: empty neighbor list")
        arr = np.sort(neighbors.astype(np.int64), axis=1)
    else:
        rows = [np.asarray(n, dtype=np.int64).reshape(-1) for n in neighbors]
        if any(r.size == 0 for r in rows):
            raise ValueError("neighborhood_max: empty neighbor list")
        width = max((r.size for r in rows), default=0)
        arr = np.empty((len(rows), width), dtype=np.int64)
        for i, r in enumerate(rows):
            r = np.sort(r)
            arr[i, : r.size] = r
            arr[i, r.size :] = r[0]
    if arr.size and (arr.min() < 0 or arr.max() >= m):
        raise IndexError(f"neighborhood_max: neighbor index out of range for {m} rows")
    return arr


def neighborhood_max(x: Tensor, neighbors) -> Tensor:
    """Channelwise max over each row's neighbor set.

    ``neighbors`` is a sequence of index lists (or a 2-D int array) into the
    rows of ``x``; the output has one row per list. Gradient goes to the
    lowest-index maximizer.
    """
    x = _as_tensor(x)
    nb = _neighbor_array(neighbors, x.shape[0])
    vals = x.values[nb]  # (q, width, k)
    arg = vals.argmax(axis=1)  # first occurrence == lowest source index
    src = np.take_along_axis(nb, arg, axis=1) if nb.size else nb
    out = np.take_along_axis(vals, arg[:, None, :], axis=1)[:, 0, :]
    shape = x.shape
    cols = np.broadcast_to(np.arange(shape[1]), src.shape)

    def rule(g):
        grad = np.zeros(shape)
        np.add.at(grad, (src, cols), g)
        return (grad,)

    return _make(out, "neighborhood_max", (x,), rule, src)


def softmax_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean (optionally class-weighted) cross-entropy over rows."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, C = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {C})")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    w = np.ones(n) if class_weights is None else np.asarray(class_weights, float)[labels]
    loss = float((w * nll).sum() / n)

    def rule(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return (float(g) * p * (w / n)[:, None],)

    return _make(np.array(loss), "softmax_cross_entropy", (logits,), rule)


# ----------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Ancestors of an objective in creation (= topological) order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.id in seen:
                continue
            seen[t.id] = t
            if t.node is not None:
                stack.extend(t.node.inputs)
        return cls(sorted(seen.values(), key=lambda t: t.id))


def backward(objective: Tensor) -> Graph:
    """Populate ``grad`` on every tensor the objective depends on.

    Gradients are added to whatever ``grad`` already holds; call
    :func:`zero_grad` first for a fresh pass.
    """
    if objective.values.size != 1 or objective.values.ndim > 1:
        raise GraphError(f"backward needs a scalar objective, got shape {objective.shape}")
    graph = Graph.trace(objective)
    local: dict[int, np.ndarray] = {objective.id: np.ones_like(objective.values)}
    for t in reversed(graph.nodes):
        g = local.get(t.id)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        factor = FAULTS.get(t.node.op)
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if factor is not None:
                gi = gi * factor
            prev = local.get(inp.id)
            local[inp.id] = gi if prev is None else prev + gi
    return graph


def branch_pattern(output: Tensor) -> tuple:
    """Branch decisions of every piecewise op the output depends on.

    Two evaluations with equal patterns lie on the same smooth piece, which
    is what finite-difference checks need.
    """
    return tuple(
        (t.node.op, t.node.pattern.tobytes())
        for t in Graph.trace(output).nodes
        if t.node is not None and t.node.pattern is not None
    )


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
