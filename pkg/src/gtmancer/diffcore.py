"""Dense float64 matrices with reverse-mode differentiation.

Every value is a 2-D ``numpy.float64`` array. Scalars are 1x1 matrices so the
whole graph has one rank. The operation set is deliberately small: it covers
what the encoder, contrastive loss, attention, propagation and classifier
need, and nothing else.

    >>> W = param(np.ones((2, 2)))
    >>> grads = backward(sum_all(W))
    >>> grads[W]
    array([[1., 1.],
           [1., 1.]])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    ConvergenceError,
    EvaluationError,
    GraphError,
    ParameterError,
    ShapeError,
)

__all__ = [
    "Node", "GradReport", "as_matrix", "param", "const",
    "matmul", "transpose", "add", "sub", "neg", "scale", "mul", "mul_scalar",
    "div_scalar", "exp", "log", "sum_all", "row_softmax", "row_log_softmax",
    "frobenius_norm", "row_normalize", "concat_cols", "flatten_rows", "pick",
    "add_n", "mean_n", "dropout", "spectral_norm_node", "custom",
    "backward", "grad_check", "spectral_norm", "top_singular_triplet",
]


def as_matrix(x, name="matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array (scalars become 1x1)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EvaluationError(f"{name}: contains non-finite entries")
    return a


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("value", "op", "parents", "grad", "requires_grad", "name", "_vjp", "__weakref__")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self._vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() on non-scalar node of shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} {self.value.shape[0]}x{self.value.shape[1]}>"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        other = _lift(other)
        if other.shape == (1, 1) and self.shape != (1, 1):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div_scalar(self, _lift(other))


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def param(value, name=None) -> Node:
    """A trainable leaf."""
    return Node(as_matrix(value, name or "param").copy(), requires_grad=True, name=name)


def const(value, name=None) -> Node:
    return Node(as_matrix(value, name or "const"), name=name)


def custom(value, parents: Sequence[Node], vjp: Callable, op="custom") -> Node:
    """Wrap an externally computed value.

    ``vjp(g)`` must return one gradient per parent, in order.
    """
    return Node(as_matrix(value, op), op, parents, vjp)


def _node(value, op, parents, vjp) -> Node:
    return Node(value, op, parents, vjp)


# -- arithmetic ---------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.value, b.value
    return _node(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Node) -> Node:
    return _node(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may be a 1 x cols row broadcast over rows."""
    if a.shape == b.shape:
        return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))
    if b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return _node(a.value + b.value, "add_row", (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeError(f"add: {a.shape} + {b.shape}")


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} - {b.shape}")
    return _node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def neg(a: Node) -> Node:
    return _node(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _node(c * a.value, "scale", (a,), lambda g: (c * g,))


def mul(a: Node, b: Node) -> Node:
    """Elementwise (Hadamard) product of equal shapes."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    A, B = a.value, b.value
    return _node(A * B, "mul", (a, b), lambda g: (g * B, g * A))


def mul_scalar(a: Node, s: Node) -> Node:
    """Matrix times a 1x1 node."""
    if s.shape != (1, 1):
        raise ShapeError(f"mul_scalar: scalar operand has shape {s.shape}")
    A, c = a.value, s.value[0, 0]
    return _node(c * A, "mul_scalar", (a, s), lambda g: (c * g, np.array([[np.sum(g * A)]])))


def div_scalar(a: Node, s: Node) -> Node:
    if s.shape != (1, 1):
        raise ShapeError(f"div_scalar: divisor has shape {s.shape}")
    c = s.value[0, 0]
    if c == 0.0:
        raise EvaluationError("div_scalar: division by zero")
    out = a.value / c
    return _node(out, "div_scalar", (a, s), lambda g: (g / c, np.array([[-np.sum(g * out) / c]])))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    A = a.value
    if np.any(A <= 0):
        raise EvaluationError("log: non-positive argument")
    return _node(np.log(A), "log", (a,), lambda g: (g / A,))


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _node(np.array([[a.value.sum()]]), "sum", (a,), lambda g: (np.full(shape, g[0, 0]),))


def _log_softmax(X):
    shifted = X - X.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def row_softmax(a: Node) -> Node:
    s = np.exp(_log_softmax(a.value))
    return _node(s, "row_softmax", (a,), lambda g: (s * (g - np.sum(g * s, axis=1, keepdims=True)),))


def row_log_softmax(a: Node) -> Node:
    """Row-wise log-softmax, stable for logits in the tens of thousands."""
    out = _log_softmax(a.value)
    s = np.exp(out)
    return _node(out, "row_log_softmax", (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def frobenius_norm(a: Node) -> Node:
    A = a.value
    n = float(np.linalg.norm(A))

    def vjp(g):
        if n == 0.0:
            raise EvaluationError("frobenius_norm: gradient undefined at zero")
        return (g[0, 0] * A / n,)

    return _node(np.array([[n]]), "frobenius_norm", (a,), vjp)


def row_normalize(a: Node) -> Node:
    """Divide each row by its Euclidean norm. Zero rows are the caller's problem."""
    norms = np.linalg.norm(a.value, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EvaluationError("row_normalize: zero row")
    y = a.value / norms
    return _node(y, "row_normalize", (a,),
                 lambda g: ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,))


def concat_cols(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ContractError("concat_cols: empty list")
    rows = {n.shape[0] for n in nodes}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {sorted(rows)}")
    splits = np.cumsum([n.shape[1] for n in nodes])[:-1]
    return _node(np.hstack([n.value for n in nodes]), "concat_cols", tuple(nodes),
                 lambda g: tuple(np.split(g, splits, axis=1)))


def flatten_rows(nodes: Sequence[Node]) -> Node:
    """Stack equally shaped matrices as rows of their row-major flattening."""
    if not nodes:
        raise ContractError("flatten_rows: empty list")
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise ShapeError("flatten_rows: shapes differ")
    out = np.stack([n.value.reshape(-1) for n in nodes])
    return _node(out, "flatten_rows", tuple(nodes),
                 lambda g: tuple(row.reshape(shape) for row in g))


def pick(a: Node, i: int, j: int) -> Node:
    """Entry (i, j) as a 1x1 node."""
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[i, j] = g[0, 0]
        return (out,)

    return _node(np.array([[a.value[i, j]]]), "pick", (a,), vjp)


def add_n(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ContractError("add_n: empty list")
    shape = nodes[0].shape
    if any(n.shape != shape for n in nodes):
        raise ShapeError("add_n: shapes differ")
    total = np.sum([n.value for n in nodes], axis=0)
    return _node(total, "add_n", tuple(nodes), lambda g: tuple(g for _ in nodes))


def mean_n(nodes: Sequence[Node]) -> Node:
    return scale(add_n(nodes), 1.0 / len(nodes))


def dropout(a: Node, rate: float, rng: np.random.Generator) -> Node:
    """Inverted dropout with a stored Bernoulli keep-mask."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = mul(a, const(mask, name="dropout_mask"))
    out.op = "dropout"
    return out


def spectral_norm_node(a: Node, tol=1e-13, max_iter=200_000) -> Node:
    """Largest singular value, differentiable through ``u v^T``."""
    sigma, u, v = top_singular_triplet(a.value, tol=tol, max_iter=max_iter)
    return _node(np.array([[sigma]]), "spectral_norm", (a,), lambda g: (g[0, 0] * np.outer(u, v),))


# -- reverse pass -------------------------------------------------------------

def _toposort(output: Node) -> list:
    """Post-order over the graph; raises on a cycle."""
    order, state = [], {}
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            s = state.get(id(p))
            if s == 1:
                raise GraphError(f"cycle detected at {p!r}")
            if s is None:
                stack.append((p, False))
    return order


def backward(output: Node, params: Iterable[Node] | None = None) -> dict:
    """Reverse accumulation from a 1x1 output.

    Returns ``{param: gradient}`` for ``params`` (default: every reachable
    leaf created with :func:`param`). Gradients are also left in ``.grad``.
    """
    if output.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) output, got {output.shape}")
    order = _toposort(output)
    for node in order:
        node.grad = None
    output.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is None or node._vjp is None:
            continue
        for parent, g in zip(node.parents, node._vjp(node.grad)):
            if g.shape != parent.shape:
                raise ShapeError(f"{node.op}: gradient {g.shape} for parent {parent.shape}")
            parent.grad = g if parent.grad is None else parent.grad + g
    if params is None:
        params = [n for n in order if n.requires_grad]
    out = {}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
        out[p] = p.grad
    return out


@dataclass
class GradReport:
    per_param: dict = field(default_factory=dict)
    max_rel_error: float = 0.0

    @property
    def worst(self):
        return max(self.per_param, key=self.per_param.get) if self.per_param else None


def _scalar_value(f, leaves) -> float:
    out = f(leaves)
    if not isinstance(out, Node) or out.shape != (1, 1):
        raise ContractError("grad_check: f must return a 1x1 Node")
    v = out.value[0, 0]
    if not np.isfinite(v):
        raise EvaluationError(f"grad_check: f returned non-finite value {v}")
    return float(v)


def grad_check(f: Callable[[Mapping[str, Node]], Node], params: Mapping[str, np.ndarray],
               h: float = 1e-5) -> GradReport:
    """Compare :func:`backward` with central differences, entry by entry.

    ``f`` receives a dict of leaf nodes keyed like ``params`` and must rebuild
    its graph on every call. Relative error per entry uses the denominator
    ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if h <= 0:
        raise ParameterError("grad_check: h must be positive")
    base = {k: as_matrix(v, k).copy() for k, v in params.items()}
    leaves = {k: param(v, name=k) for k, v in base.items()}
    out = f(leaves)
    if not np.isfinite(out.value).all():
        raise EvaluationError("grad_check: f returned non-finite value")
    analytic = backward(out, leaves.values())

    report = GradReport()
    for key, leaf in leaves.items():
        a = analytic[leaf]
        worst = 0.0
        for idx in np.ndindex(*base[key].shape):
            trial = dict(base)
            plus = base[key].copy()
            plus[idx] += h
            minus = base[key].copy()
            minus[idx] -= h
            trial[key] = plus
            fp = _scalar_value(f, {k: const(v) for k, v in trial.items()})
            trial[key] = minus
            fm = _scalar_value(f, {k: const(v) for k, v in trial.items()})
            numeric = (fp - fm) / (2.0 * h)
            denom = max(abs(a[idx]), abs(numeric), 1e-12)
            worst = max(worst, abs(a[idx] - numeric) / denom)
        report.per_param[key] = worst
    report.max_rel_error = max(report.per_param.values(), default=0.0)
    return report


# -- spectral utilities -------------------------------------------------------

def _power_on_gram(B, v, tol, max_iter):
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = B @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v, it
        lam_new = float(v @ w)
        v = w / nw
        if abs(lam_new - lam) <= tol * lam_new:
            return lam_new, v, it
        lam = lam_new
    raise ConvergenceError(
        f"power iteration did not converge in {max_iter} iterations",
        last=(float(np.sqrt(max(lam, 0.0))), v),
    )


def top_singular_triplet(A, tol=1e-12, max_iter=100_000):
    """``(sigma, u, v)`` with ``A v = sigma u`` for the largest singular value.

    Power iteration on ``A^T A`` from the uniform unit vector, then once more
    from a fixed ramp vector; the larger estimate wins. The second start
    covers matrices for which the uniform vector is an eigenvector of
    ``A^T A`` that is not the dominant one (the all-ones matrix makes this
    common in this package).
    """
    A = as_matrix(A, "A")
    n = A.shape[1]
    if A.shape[0] != n:
        raise ShapeError(f"spectral norm needs a square matrix, got {A.shape}")
    if tol <= 0:
        raise ParameterError("tol must be positive")
    B = A.T @ A
    best = None
    ramp = np.arange(1.0, n + 1.0)
    for start in (np.full(n, 1.0 / np.sqrt(n)), ramp / np.linalg.norm(ramp)):
        lam, v, _ = _power_on_gram(B, start, tol, max_iter)
        if best is None or lam > best[0] * (1.0 + 1e-9):
            best = (lam, v)
    lam, v = best
    sigma = float(np.sqrt(max(lam, 0.0)))
    u = A @ v / sigma if sigma > 0 else v.copy()
    return sigma, u, v


def spectral_norm(A, tol=1e-12, max_iter=100_000) -> float:
    """Largest singular value of a square matrix by power iteration."""
    return top_singular_triplet(A, tol=tol, max_iter=max_iter)[0]
