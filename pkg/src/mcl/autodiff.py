"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a :class:`Node` holding its value, the operand nodes
and a closure that maps the output gradient to operand gradients.  Only the
broadcasting needed by the model and losses is supported: row/column vectors
against matrices in ``add``/``mul``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class DegenerateFeatureError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def variable(x) -> Node:
    return Node(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _make(value, parents, backward_fn, op) -> Node:
    req = any(p.requires_grad for p in parents)
    return Node(value, requires_grad=req, parents=parents if req else (),
                backward_fn=backward_fn if req else None, op=op)


def _unbroadcast(grad, shape):
    # sum over axes that were broadcast from size 1 (or absent)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "add")
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def subtract(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "subtract")
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "subtract")


def scalar_mul(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(c * x.value, (x,), lambda g: (c * g,), "scalar_mul")


def add_scalar(x, c: float) -> Node:
    x = as_node(x)
    c = float(c)
    return _make(x.value + c, (x,), lambda g: (g,), "add_scalar")


def mul(a, b) -> Node:
    """Elementwise product with row/column broadcasting."""
    a, b = as_node(a), as_node(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


elementwise_mul = mul


def reciprocal(x) -> Node:
    x = as_node(x)
    if np.any(x.value == 0):
        raise ParameterError("reciprocal of zero")
    out = 1.0 / x.value
    return _make(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def log(x, floor: float = LOG_FLOOR) -> Node:
    """Natural log with the input clamped below at ``floor``.

    The clamped region has zero derivative.
    """
    x = as_node(x)
    clamped = np.maximum(x.value, floor)
    active = x.value >= floor
    return _make(np.log(clamped), (x,), lambda g: (np.where(active, g / clamped, 0.0),), "log")


def exp(x) -> Node:
    x = as_node(x)
    out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def abs(x) -> Node:  # noqa: A001 - mirrors the math name
    x = as_node(x)
    return _make(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),), "abs")


def relu(x) -> Node:
    x = as_node(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Node:
    x = as_node(x)
    out = np.tanh(x.value)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------- structural

def transpose(x) -> Node:
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.value.T.copy(), (x,), lambda g: (g.T,), "transpose")


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def sum(x) -> Node:  # noqa: A001
    x = as_node(x)
    shape = x.shape
    return _make(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Node:
    x = as_node(x)
    shape, n = x.shape, x.value.size
    return _make(np.array(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def row_sum(x) -> Node:
    """n x k -> n x 1."""
    x = as_node(x)
    if x.value.ndim != 2:
        raise DimensionError(f"row_sum expects a matrix, got shape {x.shape}")
    shape = x.shape
    return _make(x.value.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "row_sum")


def select_columns(x, cols) -> Node:
    x = as_node(x)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), cols), g)
        return (out,)

    return _make(x.value[:, cols], (x,), bw, "select_columns")


def frobenius_inner(const, x) -> Node:
    """<const, x>_F with ``const`` treated as a constant."""
    c = const.value if isinstance(const, Node) else np.asarray(const, dtype=np.float64)
    x = as_node(x)
    if c.shape != x.shape:
        raise DimensionError(f"frobenius_inner: shapes {c.shape} and {x.shape} differ")
    c = c.copy()
    return _make(np.array(np.sum(c * x.value)), (x,), lambda g: (float(g) * c,), "frobenius_inner")


def detach(x) -> Node:
    x = as_node(x)
    return Node(x.value.copy(), requires_grad=False, op="detach")


# ---------------------------------------------------------------- composite

def softmax_rows(x, temperature: float = 1.0) -> Node:
    """Row softmax of ``x / temperature`` with max subtraction."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    x = as_node(x)
    z = x.value / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (x,), bw, "softmax_rows")


def l2_normalize_rows(x, norm_floor: float = NORM_FLOOR) -> Node:
    x = as_node(x)
    norms = np.sqrt((x.value ** 2).sum(axis=1, keepdims=True))
    if np.any(norms < norm_floor):
        bad = int(np.argmin(norms[:, 0]))
        raise DegenerateFeatureError(f"row {bad} has norm {norms[bad, 0]:.3g} below {norm_floor}")
    out = x.value / norms

    def bw(g):
        proj = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * proj) / norms,)

    return _make(out, (x,), bw, "l2_normalize_rows")


# ---------------------------------------------------------------- backward

def _topo_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node."""
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    # intermediate buffers are local; only leaves keep accumulating across calls
    pending = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else np.asarray(pg, dtype=np.float64)


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray | dict
    numeric: np.ndarray | dict

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the gradient's own magnitude."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def numeric_gradient(f: Callable[[Node], Node], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(constant(x.copy())).value)
        flat[i] = orig - step
        fm = float(f(constant(x.copy())).value)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def grad_check(f: Callable[[Node], Node], x, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences."""
    leaf = variable(x)
    out = f(leaf)
    backward(out)
    analytic = leaf.grad.copy()
    numeric = numeric_gradient(f, np.asarray(x, dtype=np.float64), step)
    return GradCheckReport(relative_error(analytic, numeric), tol, analytic, numeric)


def grad_check_many(f: Callable[[Mapping[str, Node]], Node], params: Mapping[str, np.ndarray],
                    step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Like :func:`grad_check` for a function of several named tensors.

    The reported error is the worst over all tensors.
    """
    leaves = {k: variable(v) for k, v in params.items()}
    backward(f(leaves))
    analytic = {k: n.grad.copy() for k, n in leaves.items()}
    numeric, worst = {}, 0.0
    for name in params:
        others = {k: constant(v) for k, v in params.items() if k != name}

        def partial(node, name=name, others=others):
            return f({**others, name: node})

        numeric[name] = numeric_gradient(partial, params[name], step)
        worst = max(worst, relative_error(analytic[name], numeric[name]))
    return GradCheckReport(worst, tol, analytic, numeric)
