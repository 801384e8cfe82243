"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op returns a new :class:`Tensor` whose ``parents`` and ``backward_fn``
record how to push an upstream gradient to its inputs.  Calling
:func:`backward` on a scalar walks that graph in reverse topological order.
The graph is rebuilt on every forward pass; nothing is cached between steps.

Shape rules per op kind
-----------------------
matmul      (m,k)@(k,n) -> (m,n); (b,m,k)@(k,n) -> (b,m,n); (b,m,k)@(b,k,n) -> (b,m,n)
add         equal shapes, or a 1-D bias whose length equals the last dim of the other
mul         equal shapes
relu, tanh  any shape
softmax     softmax over the last axis
log_softmax log-softmax over the last axis
gather      table (V,d), integer ids of any shape S -> S + (d,)
mean        mean over one axis (axis removed)
sum         sum of all entries -> scalar
scale       multiply by a python float
reshape     any shape with the same element count
transpose   swap the last two axes
clamp_min   elementwise max(x, floor); gradient zero where clamped
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward_fn: Callable | None = None,
                 _trusted: bool = False):
        if _trusted:
            arr = np.asarray(data)
        else:
            arr = np.array(data, dtype=np.float64)
            _check_finite(arr, "tensor data")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, _trusted=True)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    _check_finite(out, f"output of {op}")
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(out, op=op, _trusted=True)
    return Tensor(out, requires_grad=True, op=op, parents=parents,
                  backward_fn=backward_fn, _trusted=True)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim == 2 and B.ndim == 2:
        if A.shape[1] != B.shape[0]:
            raise ShapeError(f"matmul {A.shape} @ {B.shape}")

        def bw(g):
            return g @ B.T, A.T @ g
    elif A.ndim == 3 and B.ndim == 2:
        if A.shape[2] != B.shape[0]:
            raise ShapeError(f"matmul {A.shape} @ {B.shape}")

        def bw(g):
            return g @ B.T, np.einsum("bmk,bmn->kn", A, g)
    elif A.ndim == 3 and B.ndim == 3:
        if A.shape[0] != B.shape[0] or A.shape[2] != B.shape[1]:
            raise ShapeError(f"matmul {A.shape} @ {B.shape}")

        def bw(g):
            return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g
    else:
        raise ShapeError(f"matmul {A.shape} @ {B.shape}")
    return _make(A @ B, "matmul", (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape == B.shape:
        def bw(g):
            return g, g
    elif B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        def bw(g):
            return g, g.reshape(-1, B.shape[0]).sum(axis=0)
    elif A.ndim == 1 and B.ndim >= 1 and B.shape[-1] == A.shape[0]:
        def bw(g):
            return g.reshape(-1, A.shape[0]).sum(axis=0), g
    else:
        raise ShapeError(f"add {A.shape} + {B.shape}")
    return _make(A + B, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.shape != B.shape:
        raise ShapeError(f"mul {A.shape} * {B.shape}")
    return _make(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def relu(x: Tensor) -> Tensor:
    X = x.data
    on = X > 0
    return _make(np.where(on, X, 0.0), "relu", (x,), lambda g: (g * on,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def softmax(x: Tensor) -> Tensor:
    X = x.data
    if X.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    z = np.exp(X - X.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)
    return _make(y, "softmax", (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    X = x.data
    if X.ndim < 1:
        raise ShapeError("log_softmax needs at least one axis")
    shifted = X - X.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _make(y, "log_softmax", (x,), bw)


def gather(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; differentiable w.r.t. the table only."""
    W = table.data
    idx = np.asarray(ids)
    if W.ndim != 2:
        raise ShapeError(f"gather table must be 2-D, got {W.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("gather ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= W.shape[0]):
        raise IndexError(f"token id out of range [0, {W.shape[0]})")

    def bw(g):
        gw = np.zeros_like(W)
        np.add.at(gw, idx.reshape(-1), g.reshape(-1, W.shape[1]))
        return (gw,)
    return _make(W[idx], "gather", (table,), bw)


def mean(x: Tensor, axis: int) -> Tensor:
    X = x.data
    ax = axis % X.ndim
    n = X.shape[ax]

    def bw(g):
        return (np.repeat(np.expand_dims(g, ax), n, axis=ax) / n,)
    return _make(X.mean(axis=ax), "mean", (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    X = x.data
    return _make(np.asarray(X.sum()), "sum", (x,), lambda g: (np.full(X.shape, float(g)),))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, "scale", (x,), lambda g: (g * c,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    X = x.data
    try:
        y = X.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(y, "reshape", (x,), lambda g: (g.reshape(X.shape),))


def transpose(x: Tensor) -> Tensor:
    X = x.data
    if X.ndim < 2:
        raise ShapeError("transpose needs >= 2 axes")
    return _make(np.swapaxes(X, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    X = x.data
    keep = X >= floor
    return _make(np.where(keep, X, floor), "clamp_min", (x,), lambda g: (g * keep,))


_OPS = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "gather": gather,
    "mean": mean,
    "sum": sum,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "clamp_min": clamp_min,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf that requires grad and returns the gradients
    for ``wrt`` in order.  A leaf the loss does not depend on gets a zero
    gradient rather than an error.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    wrt = list(wrt) if wrt is not None else []
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: list[Tensor] = []
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if node.backward_fn is None:
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros(node.shape)
                leaves.append(node)
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    reached = {id(leaf) for leaf in leaves}
    out = []
    for t in wrt:
        if id(t) not in reached:
            t.grad = np.zeros(t.shape)
        out.append(t.grad)
    return out


# ---------------------------------------------------------------------------
# losses


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ShapeError("labels must be a 1-D index array")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise IndexError(f"label out of range [0, {num_classes})")
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (B, C), got {logits.shape}")
    B, C = logits.shape
    y = one_hot(labels, C)
    if y.shape[0] != B:
        raise ShapeError(f"{y.shape[0]} labels for batch of {B}")
    logp = clamp_min(log_softmax(logits), LOG_PROB_FLOOR)
    return scale(sum(mul(logp, Tensor(y, _trusted=True))), -1.0 / B)


def bidirectional_kl(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Batch mean of KL(P||Q) + KL(Q||P) with probabilities floored at 1e-12."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl shapes {p_logits.shape} vs {q_logits.shape}")
    B = p_logits.shape[0] if p_logits.data.ndim > 1 else 1
    logp = clamp_min(log_softmax(p_logits), LOG_PROB_FLOOR)
    logq = clamp_min(log_softmax(q_logits), LOG_PROB_FLOOR)
    p = softmax(p_logits)
    q = softmax(q_logits)
    # KL(P||Q) + KL(Q||P) = sum (p - q) * (log p - log q)
    diff_p = add(p, scale(q, -1.0))
    diff_log = add(logp, scale(logq, -1.0))
    return scale(sum(mul(diff_p, diff_log)), 1.0 / B)
