"""Dense float64 matrices with reverse-mode gradient support.

Everything downstream (the attention units, both losses, the TCN baseline)
is built from the operations in this module.  Values are plain 2-D numpy
arrays wrapped in graph :class:`Node` objects; each operation records how to
push an upstream gradient back to its operands, and :func:`backward` replays
those rules from a scalar output.  Analytic gradients are verified against
central finite differences with :func:`grad_check`.

Conventions
-----------
* everything is 2-D: scalars are ``1x1``, row vectors ``1xd``;
* float64 throughout (storage formats may narrow, computation never does);
* broadcasting is limited to adding a ``1xd`` row bias to an ``nxd`` matrix.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericError

_node_ids = itertools.count()


class Node:
    """A matrix value plus the bookkeeping for reverse-mode differentiation.

    ``value`` is a 2-D float64 array.  ``grad`` has the same shape, starts at
    zero, and is filled in by :func:`backward`.  ``parents`` are the operand
    nodes; ``_push`` maps an upstream gradient to one contribution per parent.
    """

    __slots__ = ("value", "grad", "parents", "_push", "id")

    def __init__(self, value, parents=(), push=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"nodes hold 2-D values, got shape {arr.shape}")
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.value = arr
        self.grad = np.zeros_like(arr)
        self.parents = tuple(parents)
        self._push = push
        self.id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(shape={self.value.shape}, id={self.id})"


def as_node(x) -> Node:
    """Wrap ``x`` in a leaf Node; scalars become 1x1, 1-D arrays row vectors."""
    return x if isinstance(x, Node) else Node(x)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product ``a @ b``; differentiable in both operands."""
    a, b = as_node(a), as_node(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def push(g):
        return (g @ bv.T, av.T @ g)

    return Node(av @ bv, (a, b), push)


def add(a, b) -> Node:
    """Elementwise sum; also accepts a 1xd row bias against an nxd matrix."""
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        def push(g):
            return (g, g)
    elif sb == (1, sa[1]):
        def push(g):
            return (g, g.sum(axis=0, keepdims=True))
    elif sa == (1, sb[1]):
        def push(g):
            return (g.sum(axis=0, keepdims=True), g)
    else:
        raise DimensionError(f"add: incompatible shapes {sa} and {sb}")
    return Node(a.value + b.value, (a, b), push)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def push(g):
        return (g, -g)

    return Node(a.value - b.value, (a, b), push)


def mul(a, b) -> Node:
    """Elementwise (Hadamard) product of same-shape operands."""
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def push(g):
        return (g * bv, g * av)

    return Node(av * bv, (a, b), push)


def div(a, b) -> Node:
    """Elementwise quotient of same-shape operands."""
    a, b = as_node(a), as_node(b)
    if a.shape != b.shape:
        raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def push(g):
        return (g / bv, -g * av / (bv * bv))

    return Node(av / bv, (a, b), push)


def scale(a, c: float) -> Node:
    """Multiply by a python scalar constant (not differentiated in ``c``)."""
    a = as_node(a)
    c = float(c)

    def push(g):
        return (g * c,)

    return Node(a.value * c, (a,), push)


def transpose(a) -> Node:
    a = as_node(a)

    def push(g):
        return (g.T,)

    return Node(a.value.T, (a,), push)


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0.0

    def push(g):
        return (g * mask,)

    return Node(np.where(mask, a.value, 0.0), (a,), push)


def sigmoid(a) -> Node:
    """Numerically stable logistic function, elementwise."""
    a = as_node(a)
    v = a.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def push(g):
        return (g * out * (1.0 - out),)

    return Node(out, (a,), push)


def softmax_rows(a) -> Node:
    """Row-wise softmax, stabilized by subtracting each row's maximum.

    Every output row is nonnegative and sums to 1; adding a constant to a
    row of the input leaves that row's output unchanged.
    """
    a = as_node(a)
    v = a.value
    shifted = v - v.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def push(g):
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return Node(s, (a,), push)


def layer_norm_rows(a, gamma, beta, eps: float = 1e-6) -> Node:
    """Normalize each row to zero mean and unit variance, then scale/shift.

    ``gamma`` and ``beta`` are 1xd rows.  ``eps`` stabilizes the variance;
    the backward rule differentiates through mean and variance exactly.
    """
    a, gamma, beta = as_node(a), as_node(gamma), as_node(beta)
    d = a.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise DimensionError(f"layer_norm_rows: gamma/beta must be (1, {d}), "
                             f"got {gamma.shape} and {beta.shape}")
    v = a.value
    mean = v.mean(axis=1, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    gv = gamma.value

    def push(g):
        g_norm = g * gv
        # d normalized / d v: (I - 1/d) * inv_std - centered * dvar term
        dot = (g_norm * normalized).sum(axis=1, keepdims=True)
        mean_g = g_norm.mean(axis=1, keepdims=True)
        da = inv_std * (g_norm - mean_g - normalized * dot / d)
        dgamma = (g * normalized).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        return (da, dgamma, dbeta)

    return Node(normalized * gv + beta.value, (a, gamma, beta), push)


def hconcat(a, b) -> Node:
    """Concatenate two matrices with equal row counts along columns."""
    a, b = as_node(a), as_node(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"hconcat: row counts differ, {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def push(g):
        return (g[:, :ca], g[:, ca:])

    return Node(np.concatenate([a.value, b.value], axis=1), (a, b), push)


def gather_rows(a, indices) -> Node:
    """Select rows ``a[indices]``; backward scatter-adds into the source."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InputError(f"gather_rows: index out of range for {n} rows")

    def push(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return (out,)

    return Node(a.value[idx], (a,), push)


def row_norms(a) -> Node:
    """Euclidean norm of each row, as an nx1 column.

    The norm is not differentiable at an all-zero row; the backward rule
    uses the zero subgradient there so training on collapsed rows stays
    finite.
    """
    a = as_node(a)
    v = a.value
    r = np.sqrt((v * v).sum(axis=1, keepdims=True))

    def push(g):
        direction = np.divide(v, r, out=np.zeros_like(v), where=r > 0.0)
        return (g * direction,)

    return Node(r, (a,), push)


def sum_all(a) -> Node:
    a = as_node(a)

    def push(g):
        return (np.full_like(a.value, g[0, 0]),)

    return Node([[a.value.sum()]], (a,), push)


def mean_all(a) -> Node:
    a = as_node(a)
    size = a.value.size

    def push(g):
        return (np.full_like(a.value, g[0, 0] / size),)

    return Node([[a.value.mean()]], (a,), push)


def mean_over_rows(a) -> Node:
    """Average the rows of an nxd matrix into a 1xd row."""
    a = as_node(a)
    n = a.shape[0]

    def push(g):
        return (np.repeat(g, n, axis=0) / n,)

    return Node(a.value.mean(axis=0, keepdims=True), (a,), push)


def nll_from_logits(logits, label: int) -> Node:
    """Negative log-likelihood of ``label`` under softmax(logits).

    ``logits`` is a 1xC row; computed in log-space so large magnitudes do
    not overflow.
    """
    lg = as_node(logits)
    if lg.shape[0] != 1:
        raise DimensionError(f"nll_from_logits: logits must be 1xC, got {lg.shape}")
    num_classes = lg.shape[1]
    if not 0 <= int(label) < num_classes:
        raise InputError(f"label {label} out of range for {num_classes} classes")
    label = int(label)
    v = lg.value
    m = v.max()
    lse = m + np.log(np.exp(v - m).sum())
    probs = np.exp(v - lse)
    onehot = np.zeros_like(v)
    onehot[0, label] = 1.0

    def push(g):
        return ((probs - onehot) * g[0, 0],)

    return Node([[lse - v[0, label]]], (lg,), push)


def weighted_bce_with_logits(logits, targets, pos_weight: float = 1.0) -> Node:
    """Mean binary cross-entropy on logits with a positive-class weight.

    ``targets`` is a constant 0/1 array of the same shape.  With
    ``pos_weight=1`` this is ordinary BCE.  Computed via softplus so large
    logits stay finite.
    """
    z = as_node(logits)
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    w = float(pos_weight)
    if w <= 0.0:
        raise InputError(f"pos_weight must be positive, got {w}")
    zv = z.value
    per = w * y * np.logaddexp(0.0, -zv) + (1.0 - y) * np.logaddexp(0.0, zv)
    size = zv.size
    sig = np.empty_like(zv)
    pos = zv >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-zv[pos]))
    ez = np.exp(zv[~pos])
    sig[~pos] = ez / (1.0 + ez)

    def push(g):
        return (g[0, 0] * (w * y * (sig - 1.0) + (1.0 - y) * sig) / size,)

    return Node([[per.mean()]], (z,), push)


def linear(x, weight, bias=None) -> Node:
    """Affine map ``x @ weight (+ bias)`` with the bias broadcast per row."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def toposort(root: Node, method: str = "id") -> list[Node]:
    """All nodes reachable from ``root``, ancestors before descendants.

    ``method="id"`` sorts by creation order (parents are always created
    first); ``method="dfs"`` emits an iterative depth-first postorder.  Both
    are valid topological orders and exist so the traversal-order
    independence of :func:`backward` can be exercised.
    """
    if method == "id":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.id)
        return nodes
    if method == "dfs":
        out: list[Node] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                out.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for parent in node.parents:
                stack.append((parent, False))
        return out
    raise InputError(f"unknown toposort method {method!r}")


def backward(root: Node, traversal: Sequence[Node] | None = None) -> None:
    """Fill ``grad`` for every node reachable from the scalar ``root``.

    Gradient contributions into a node are summed in a canonical order
    (sorted by the id of the consumer that produced them), so any valid
    topological ``traversal`` yields bit-identical gradients.
    """
    if root.value.shape != (1, 1):
        raise InputError(f"backward starts from a scalar node, got shape {root.value.shape}")
    reachable = toposort(root)
    if traversal is None:
        order = reachable
    else:
        order = list(traversal)
        if {n.id for n in order} != {n.id for n in reachable}:
            raise InputError("traversal does not cover exactly the nodes reachable from root")
    contribs: dict[int, list[tuple[int, np.ndarray]]] = {root.id: [(-1, np.ones((1, 1)))]}
    for node in reversed(order):
        entries = contribs.pop(node.id, None)
        if entries is None:
            node.grad = np.zeros_like(node.value)
            continue
        entries.sort(key=lambda item: item[0])
        grad = entries[0][1].copy()
        for _, extra in entries[1:]:
            grad += extra
        node.grad = grad
        if node.parents and node._push is not None:
            for parent, contribution in zip(node.parents, node._push(grad)):
                contribs.setdefault(parent.id, []).append((node.id, contribution))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[], Node], params: Iterable[Node], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the loss graph from the current parameter
    values on every call and be deterministic for fixed parameters.  Every
    entry of every parameter is perturbed by ``+/-eps``; the relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as the denominator so exact
    zeros do not blow up.
    """
    if eps <= 0.0:
        raise InputError(f"eps must be positive, got {eps}")
    params = list(params)
    root = loss_fn()
    if not np.isfinite(root.value).all():
        raise NumericError("loss is not finite at the unperturbed parameters")
    backward(root)
    analytic = [p.grad.copy().reshape(-1) for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + eps
            up = loss_fn().item()
            flat[j] = saved - eps
            down = loss_fn().item()
            flat[j] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing parameter {pi} entry {j}")
            numeric = (up - down) / (2.0 * eps)
            a = analytic[pi][j]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
