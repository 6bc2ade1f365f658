"""Reverse-mode automatic differentiation on a define-by-run tape.

Every node holds a flat numpy buffer of float64 values. Primitives act
elementwise with numpy broadcasting, so each element follows ordinary scalar
calculus; structural helpers (matmul, sum, take, ...) are recorded with
deferred partial rules that run during `Tape.backward`.

The module-level helpers (`exp`, `sin`, `stack`, ...) accept either tape
values (`Dual`) or plain arrays. Geometry and rendering code is written once
against these helpers and runs both on the tape during training and on plain
arrays when generating data or evaluating.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import DomainError, InvariantError, NumericError


ArrayLike = Union[np.ndarray, float, int]
VJP = Callable[[np.ndarray, np.ndarray, Tuple[np.ndarray, ...], Dict[str, Any]], Tuple[Optional[np.ndarray], ...]]


@dataclass
class _Node:
    kind: str
    parents: Tuple[int, ...]
    value: np.ndarray
    attrs: Dict[str, Any] = field(default_factory=dict)
    rule: Optional[VJP] = None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -------------------- primitive rules --------------------

def _fwd_add(vals, attrs):
    return vals[0] + vals[1]


def _vjp_add(g, out, vals, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _fwd_sub(vals, attrs):
    return vals[0] - vals[1]


def _vjp_sub(g, out, vals, attrs):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)


def _fwd_mul(vals, attrs):
    return vals[0] * vals[1]


def _vjp_mul(g, out, vals, attrs):
    return _unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape)


def _fwd_div(vals, attrs):
    if np.any(vals[1] == 0):
        raise DomainError("division by zero")
    return vals[0] / vals[1]


def _vjp_div(g, out, vals, attrs):
    a, b = vals
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def _fwd_neg(vals, attrs):
    return -vals[0]


def _vjp_neg(g, out, vals, attrs):
    return (-g,)


def _fwd_exp(vals, attrs):
    return np.exp(vals[0])


def _vjp_exp(g, out, vals, attrs):
    return (g * out,)


def _fwd_log(vals, attrs):
    if np.any(vals[0] <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(vals[0])


def _vjp_log(g, out, vals, attrs):
    return (g / vals[0],)


def _fwd_sin(vals, attrs):
    return np.sin(vals[0])


def _vjp_sin(g, out, vals, attrs):
    return (g * np.cos(vals[0]),)


def _fwd_cos(vals, attrs):
    return np.cos(vals[0])


def _vjp_cos(g, out, vals, attrs):
    return (-g * np.sin(vals[0]),)


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _vjp_relu(g, out, vals, attrs):
    return (g * (vals[0] > 0),)


def _fwd_pow(vals, attrs):
    x, p = vals[0], attrs["exponent"]
    if float(p) != int(p) and np.any(x < 0):
        raise DomainError("fractional power of a negative value")
    if p < 0 and np.any(x == 0):
        raise DomainError("negative power of zero")
    return np.power(x, p)


def _vjp_pow(g, out, vals, attrs):
    p = attrs["exponent"]
    if p == 0:
        return (np.zeros_like(vals[0]),)
    return (g * p * np.power(vals[0], p - 1),)


def _fwd_sqrt(vals, attrs):
    if np.any(vals[0] < 0):
        raise DomainError("square root of a negative value")
    return np.sqrt(vals[0])


def _vjp_sqrt(g, out, vals, attrs):
    """0.5 / sqrt(x), and zero where x == 0."""
    positive = out > 0
    return (np.where(positive, 0.5 * g / np.where(positive, out, 1.0), 0.0),)


def _fwd_min_const(vals, attrs):
    return np.minimum(vals[0], attrs["bound"])


def _vjp_min_const(g, out, vals, attrs):
    return (g * (vals[0] <= attrs["bound"]),)


def _fwd_max_const(vals, attrs):
    return np.maximum(vals[0], attrs["bound"])


def _vjp_max_const(g, out, vals, attrs):
    return (g * (vals[0] >= attrs["bound"]),)


def _fwd_sigmoid(vals, attrs):
    return expit(vals[0])


def _vjp_sigmoid(g, out, vals, attrs):
    return (g * out * (1.0 - out),)


def _fwd_softplus(vals, attrs):
    return np.logaddexp(0.0, vals[0])


def _vjp_softplus(g, out, vals, attrs):
    return (g * expit(vals[0]),)


def _flat_rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _fwd_matmul(vals, attrs):
    a, b = vals
    if b.ndim == 2 and a.ndim > 2:
        # single gemm over the flattened leading axes
        return (_flat_rows(a) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return np.matmul(a, b)


def _vjp_matmul(g, out, vals, attrs):
    a, b = vals
    if b.ndim == 2 and a.ndim >= 2:
        g2 = _flat_rows(g)
        return (g2 @ b.T).reshape(a.shape), _flat_rows(a).T @ g2
    ga = np.matmul(g, np.swapaxes(b, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b)
    gb = np.matmul(np.swapaxes(a, -1, -2), g) if a.ndim > 1 else np.multiply.outer(a, g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _fwd_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _vjp_sum(g, out, vals, attrs):
    x = vals[0]
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _fwd_reshape(vals, attrs):
    return np.reshape(vals[0], attrs["shape"])


def _vjp_reshape(g, out, vals, attrs):
    return (np.reshape(g, vals[0].shape),)


def _fwd_take(vals, attrs):
    return np.take(vals[0], attrs["indices"], axis=attrs["axis"])


def _vjp_take(g, out, vals, attrs):
    x, idx, axis = vals[0], attrs["indices"], attrs["axis"]
    grad = np.zeros_like(x)
    moved = np.moveaxis(grad, axis, 0)
    span = list(range(axis, axis + idx.ndim))
    np.add.at(moved, idx, np.moveaxis(g, span, list(range(idx.ndim))))
    return (grad,)


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def _fwd_getitem(vals, attrs):
    return np.array(vals[0][attrs["key"]], dtype=np.float64)


def _vjp_getitem(g, out, vals, attrs):
    grad = np.zeros_like(vals[0])
    key = attrs["key"]
    if _is_advanced(key):
        np.add.at(grad, key, g)
    else:
        grad[key] += g
    return (grad,)


def _fwd_concat(vals, attrs):
    return np.concatenate(vals, axis=attrs["axis"])


def _vjp_concat(g, out, vals, attrs):
    axis = attrs["axis"]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


def _fwd_stack(vals, attrs):
    return np.stack(vals, axis=attrs["axis"])


def _vjp_stack(g, out, vals, attrs):
    axis = attrs["axis"]
    return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))


def _shift(values: np.ndarray, axis: int, forward: bool) -> np.ndarray:
    """Shift by one slot along `axis`, filling the vacated slot with zero."""
    out = np.zeros_like(values)
    src = [slice(None)] * values.ndim
    dst = [slice(None)] * values.ndim
    src[axis], dst[axis] = (slice(None, -1), slice(1, None)) if forward else (slice(1, None), slice(None, -1))
    out[tuple(dst)] = values[tuple(src)]
    return out


def _fwd_cumsum(vals, attrs):
    running = np.cumsum(vals[0], axis=attrs["axis"])
    return _shift(running, attrs["axis"], forward=True) if attrs["exclusive"] else running


def _vjp_cumsum(g, out, vals, attrs):
    axis = attrs["axis"]
    rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
    return (_shift(rev, axis, forward=False) if attrs["exclusive"] else rev,)


def _fwd_grad_scale(vals, attrs):
    return vals[0]


def _vjp_grad_scale(g, out, vals, attrs):
    return (_unbroadcast(g * attrs["factor"], vals[0].shape),)


_OPS: Dict[str, Tuple[Callable, VJP]] = {
    "add": (_fwd_add, _vjp_add),
    "sub": (_fwd_sub, _vjp_sub),
    "mul": (_fwd_mul, _vjp_mul),
    "div": (_fwd_div, _vjp_div),
    "neg": (_fwd_neg, _vjp_neg),
    "exp": (_fwd_exp, _vjp_exp),
    "log": (_fwd_log, _vjp_log),
    "sin": (_fwd_sin, _vjp_sin),
    "cos": (_fwd_cos, _vjp_cos),
    "relu": (_fwd_relu, _vjp_relu),
    "pow": (_fwd_pow, _vjp_pow),
    "sqrt": (_fwd_sqrt, _vjp_sqrt),
    "min_const": (_fwd_min_const, _vjp_min_const),
    "max_const": (_fwd_max_const, _vjp_max_const),
    "sigmoid": (_fwd_sigmoid, _vjp_sigmoid),
    "softplus": (_fwd_softplus, _vjp_softplus),
    "matmul": (_fwd_matmul, _vjp_matmul),
    "sum": (_fwd_sum, _vjp_sum),
    "reshape": (_fwd_reshape, _vjp_reshape),
    "take": (_fwd_take, _vjp_take),
    "getitem": (_fwd_getitem, _vjp_getitem),
    "concat": (_fwd_concat, _vjp_concat),
    "stack": (_fwd_stack, _vjp_stack),
    "cumsum": (_fwd_cumsum, _vjp_cumsum),
    "grad_scale": (_fwd_grad_scale, _vjp_grad_scale),
}

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "exp", "log", "sin", "cos", "relu",
    "pow", "sqrt", "min_const", "max_const",
)


class Tape:
    """Append-only record of one forward pass.

    A fresh tape is built for every training step; independent tapes may run
    on separate threads, but a single tape is not thread-safe.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.parameters: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: _Node) -> "Dual":
        node_id = len(self.nodes)
        if not np.all(np.isfinite(node.value)):
            raise NumericError(f"non-finite forward value in '{node.kind}'", node_id=node_id)
        self.nodes.append(node)
        return Dual(self, node_id)

    def constant(self, value: ArrayLike) -> "Dual":
        return self._append(_Node("const", (), np.asarray(value, dtype=np.float64)))

    def parameter(self, name: str, value: ArrayLike) -> "Dual":
        if name in self.parameters:
            return Dual(self, self.parameters[name])
        dual = self._append(_Node("param", (), np.asarray(value, dtype=np.float64), {"name": name}))
        self.parameters[name] = dual.index
        return dual

    def lift(self, x: Union["Dual", ArrayLike]) -> "Dual":
        if isinstance(x, Dual):
            if x.tape is not self:
                raise InvariantError("values from different tapes cannot be combined")
            return x
        return self.constant(x)

    def record(self, op: str, parents: Sequence[Union["Dual", ArrayLike]], **attrs) -> "Dual":
        """Append `op` applied to `parents`; returns the new node."""
        try:
            forward, rule = _OPS[op]
        except KeyError:
            raise InvariantError(f"unknown op '{op}'") from None
        lifted = [self.lift(p) for p in parents]
        vals = tuple(self.nodes[p.index].value for p in lifted)
        value = np.asarray(forward(vals, attrs), dtype=np.float64)
        return self._append(_Node(op, tuple(p.index for p in lifted), value, attrs, rule))

    def custom(self, kind: str, parents: Sequence["Dual"], value: np.ndarray, rule: VJP, **attrs) -> "Dual":
        """Append a node whose forward value is precomputed and whose partials come from `rule`."""
        lifted = [self.lift(p) for p in parents]
        node = _Node(kind, tuple(p.index for p in lifted), np.asarray(value, dtype=np.float64), attrs, rule)
        return self._append(node)

    def grad_scale(self, node: "Dual", factor: ArrayLike) -> "Dual":
        """Identity in the forward pass; multiplies the backward signal by `factor`."""
        factor = np.asarray(factor, dtype=np.float64)
        if np.any(factor < 0.0) or np.any(factor > 1.0) or not np.all(np.isfinite(factor)):
            raise InvariantError("gradient scale factor must lie in [0, 1]")
        return self.record("grad_scale", [node], factor=factor)

    def backward(self, loss: "Dual") -> Dict[str, np.ndarray]:
        """Adjoints of `loss` for every registered parameter (zero when unreachable)."""
        loss = self.lift(loss)
        if self.nodes[loss.index].value.size != 1:
            raise InvariantError("backward requires a scalar loss node")
        adjoints: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        adjoints[loss.index] = np.ones_like(self.nodes[loss.index].value)
        for node_id in range(loss.index, -1, -1):
            g = adjoints[node_id]
            node = self.nodes[node_id]
            if g is None or not node.parents:
                continue
            vals = tuple(self.nodes[p].value for p in node.parents)
            contributions = node.rule(g, node.value, vals, node.attrs)
            for parent, contrib in zip(node.parents, contributions):
                if contrib is None:
                    continue
                if not np.all(np.isfinite(contrib)):
                    raise NumericError(f"non-finite adjoint flowing out of '{node.kind}'", node_id=node_id)
                current = adjoints[parent]
                adjoints[parent] = contrib if current is None else current + contrib
        grads: Dict[str, np.ndarray] = {}
        for name, node_id in self.parameters.items():
            g = adjoints[node_id]
            value = self.nodes[node_id].value
            grads[name] = np.zeros_like(value) if g is None else np.array(g, dtype=np.float64).reshape(value.shape)
        return grads


class Dual:
    """Handle to a node on a tape, with numpy-style operator overloading."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Dual(node={self.index}, shape={self.shape})"

    def __add__(self, other):
        return self.tape.record("add", [self, other])

    def __radd__(self, other):
        return self.tape.record("add", [other, self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, other])

    def __rsub__(self, other):
        return self.tape.record("sub", [other, self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, other])

    def __rmul__(self, other):
        return self.tape.record("mul", [other, self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, other])

    def __rtruediv__(self, other):
        return self.tape.record("div", [other, self])

    def __neg__(self):
        return self.tape.record("neg", [self])

    def __pow__(self, exponent):
        if isinstance(exponent, Dual):
            raise InvariantError("exponent must be a constant")
        return self.tape.record("pow", [self], exponent=float(exponent))

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, other])

    def __rmatmul__(self, other):
        return self.tape.record("matmul", [other, self])

    def __getitem__(self, key):
        return self.tape.record("getitem", [self], key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Dual":
        return self.tape.record("sum", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Dual":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", [self], shape=shape)


Value = Union[Dual, np.ndarray]


def value_of(x: Union[Dual, ArrayLike]) -> np.ndarray:
    return x.value if isinstance(x, Dual) else np.asarray(x, dtype=np.float64)


def _tape_of(items: Sequence[Any]) -> Optional[Tape]:
    for item in items:
        if isinstance(item, Dual):
            return item.tape
    return None


def _unary(op: str, numpy_fn: Callable[[np.ndarray], np.ndarray]):
    def apply(x):
        if isinstance(x, Dual):
            return x.tape.record(op, [x])
        return numpy_fn(np.asarray(x, dtype=np.float64))
    apply.__name__ = op
    return apply


exp = _unary("exp", np.exp)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
relu = _unary("relu", lambda x: np.maximum(x, 0.0))
sigmoid = _unary("sigmoid", expit)
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x))


def log(x):
    if isinstance(x, Dual):
        return x.tape.record("log", [x])
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise DomainError("log of a non-positive value")
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        return x.tape.record("sqrt", [x])
    return np.sqrt(x)


def minimum_const(x, bound: float):
    if isinstance(x, Dual):
        return x.tape.record("min_const", [x], bound=float(bound))
    return np.minimum(x, bound)


def maximum_const(x, bound: float):
    if isinstance(x, Dual):
        return x.tape.record("max_const", [x], bound=float(bound))
    return np.maximum(x, bound)


def matmul(a, b):
    tape = _tape_of((a, b))
    if tape is None:
        return np.matmul(a, b)
    return tape.record("matmul", [a, b])


def total(x, axis=None, keepdims: bool = False):
    if isinstance(x, Dual):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def reshape(x, shape):
    if isinstance(x, Dual):
        return x.reshape(shape)
    return np.reshape(x, shape)


def take(x, indices, axis: int = 0):
    indices = np.asarray(indices, dtype=np.int64)
    if axis < 0:
        axis += np.ndim(value_of(x))
    if isinstance(x, Dual):
        return x.tape.record("take", [x], indices=indices, axis=axis)
    return np.take(x, indices, axis=axis)


def concatenate(items: Sequence[Any], axis: int = -1):
    tape = _tape_of(items)
    if tape is None:
        return np.concatenate([np.asarray(i, dtype=np.float64) for i in items], axis=axis)
    return tape.record("concat", list(items), axis=axis)


def stack(items: Sequence[Any], axis: int = -1):
    tape = _tape_of(items)
    if tape is None:
        return np.stack([np.asarray(i, dtype=np.float64) for i in items], axis=axis)
    if axis < 0:
        axis += np.ndim(value_of(items[0])) + 1
    return tape.record("stack", list(items), axis=axis)


def cumsum(x, axis: int = -1, exclusive: bool = False):
    if isinstance(x, Dual):
        if axis < 0:
            axis += x.ndim
        return x.tape.record("cumsum", [x], axis=axis, exclusive=exclusive)
    x = np.asarray(x, dtype=np.float64)
    axis = axis + x.ndim if axis < 0 else axis
    return _fwd_cumsum((x,), {"axis": axis, "exclusive": exclusive})


def grad_scale(x, factor):
    """Backward-only scaling; plain arrays pass through untouched."""
    if isinstance(x, Dual):
        return x.tape.grad_scale(x, factor)
    return x


def dot(a, b, axis: int = -1):
    return total(a * b, axis=axis)


def cross(a, b):
    """Cross product over the last axis, written with tape-friendly indexing."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def softmax(x, axis: int = -1):
    """Softmax with a constant max shift (the shift carries no gradient)."""
    shift = np.max(value_of(x), axis=axis, keepdims=True)
    e = exp(x - shift)
    return e / total(e, axis=axis, keepdims=True)


def linear(x, weight, bias):
    return matmul(x, weight) + bias


def bind(params: Dict[str, np.ndarray], tape: Optional[Tape]) -> Dict[str, Any]:
    """Parameters as tape inputs, or the raw arrays when there is no tape."""
    if tape is None:
        return dict(params)
    return {name: tape.parameter(name, value) for name, value in params.items()}
