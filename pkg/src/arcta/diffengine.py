"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every primitive operation applied to :class:`Var`
wrappers.  ``backward`` replays the tape in reverse, accumulating adjoints
into a :class:`ParamStore`.  Time derivatives of tape outputs are obtained
with :func:`jvp`, which *builds the tangent computation out of taped
primitives*, so the resulting derivative is itself differentiable with
respect to every parameter on the same tape (one tape, mixed partials --
no nested tapes).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

_DTYPES = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64


def set_default_dtype(name: str) -> None:
    """Select the working precision ("float64" default, "float32" optional)."""
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}")
    _dtype = _DTYPES[name]


def default_dtype():
    return _dtype


class DiffEngineError(Exception):
    pass


class ShapeMismatch(DiffEngineError):
    """Raised when operand shapes are incompatible; names the primitive."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=_dtype)


# ---------------------------------------------------------------------------
# tape and variables


class Node:
    __slots__ = ("op", "value", "parents", "aux")

    def __init__(self, op, value, parents=(), aux=None):
        self.op = op
        self.value = value
        self.parents = parents
        self.aux = aux


class Tape:
    """Ordered list of primitive operations; inputs always precede users."""

    __slots__ = ("nodes", "_output_idx")

    def __init__(self):
        self.nodes: list[Node] = []
        self._output_idx: int | None = None

    @property
    def output(self) -> "Var | None":
        # stored as an index: a Var here would create a Tape <-> Var cycle
        # and force gc passes over large tapes
        return None if self._output_idx is None else Var(self, self._output_idx)

    @output.setter
    def output(self, var: "Var") -> None:
        self._output_idx = var.idx

    def _emit(self, op, value, parents=(), aux=None) -> "Var":
        self.nodes.append(Node(op, value, parents, aux))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> "Var":
        return self._emit("leaf", _as_array(value))

    def param(self, store: "ParamStore", name: str) -> "Var":
        return self._emit("leaf", store.value(name), aux=(store, name))


class Var:
    """Handle to a tape node.  Supports +, -, *, / and @ with Vars,
    python scalars, and raw arrays (lifted to constants)."""

    __slots__ = ("tape", "idx")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, tape: Tape, idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            if other.tape is not self.tape:
                raise DiffEngineError("operands live on different tapes")
            return other
        return self.tape.const(other)

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other)) if isinstance(other, (int, float)) else sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named flat parameter arrays with per-parameter gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise DiffEngineError(f"parameter {name!r} already registered")
        arr = _as_array(value).copy()
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self):
        return list(self._values)

    def __contains__(self, name):
        return name in self._values

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = _as_array(value)
        if arr.shape != self._values[name].shape:
            raise ShapeMismatch(f"set_value: shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr.copy()

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        self._grads[name] = self._grads[name] + g

    def zero_grads(self) -> None:
        for name, v in self._values.items():
            self._grads[name] = np.zeros_like(v)

    def n_params(self) -> int:
        return sum(v.size for v in self._values.values())

    def flat_values(self) -> np.ndarray:
        return np.concatenate([self._values[n].ravel() for n in self._values]) if self._values else np.zeros(0)

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([self._grads[n].ravel() for n in self._values]) if self._values else np.zeros(0)

    def load_flat(self, flat: np.ndarray) -> None:
        i = 0
        for n, v in self._values.items():
            self._values[n] = flat[i : i + v.size].reshape(v.shape).astype(v.dtype)
            i += v.size
        if i != flat.size:
            raise ShapeMismatch("load_flat: size mismatch")


class Bound:
    """Caches one leaf Var per parameter name for a (tape, store) pair."""

    def __init__(self, tape: Tape, store: ParamStore):
        self.tape = tape
        self.store = store
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        v = self._cache.get(name)
        if v is None:
            v = self.tape.param(self.store, name)
            self._cache[name] = v
        return v


# ---------------------------------------------------------------------------
# broadcasting policy: equal shapes, scalar () with anything, or an operand
# whose shape is a suffix of the other's (row-wise bias add and its batched
# generalization).  Nothing else.


def _bcast_shape(op, sa, sb):
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sb) < len(sa) and sa[len(sa) - len(sb) :] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa) :] == sa:
        return sb
    raise ShapeMismatch(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # suffix shape: sum over all leading axes
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (matmul batch broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives: each op has a value function (used at build time and for
# bit-identical tape replay), a vjp, and a tangent rule built from taped
# primitives so forward-mode results stay differentiable.

_VALUE = {}
_VJP = {}
_JVP = {}


def _primitive(name):
    def deco(fn):
        _VALUE[name] = fn
        return fn

    return deco


def _vjp(name):
    def deco(fn):
        _VJP[name] = fn
        return fn

    return deco


def _jvp(name):
    def deco(fn):
        _JVP[name] = fn
        return fn

    return deco


def _binary(op, a: Var, b: Var) -> Var:
    _bcast_shape(op, a.shape, b.shape)
    val = _VALUE[op]([a.value, b.value], None)
    return a.tape._emit(op, val, (a.idx, b.idx))


# -- arithmetic -------------------------------------------------------------


@_primitive("add")
def _v_add(p, aux):
    return p[0] + p[1]


@_vjp("add")
def _b_add(node, g, vals):
    return (_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape))


@_jvp("add")
def _t_add(out, parents, tans):
    ta, tb = tans
    if ta is None:
        return _match_tan(tb, parents[1], out)
    if tb is None:
        return _match_tan(ta, parents[0], out)
    return add(ta, tb)


@_primitive("sub")
def _v_sub(p, aux):
    return p[0] - p[1]


@_vjp("sub")
def _b_sub(node, g, vals):
    return (_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape))


@_jvp("sub")
def _t_sub(out, parents, tans):
    ta, tb = tans
    if ta is None:
        return _match_tan(neg(tb), parents[1], out)
    if tb is None:
        return _match_tan(ta, parents[0], out)
    return sub(ta, tb)


@_primitive("mul")
def _v_mul(p, aux):
    return p[0] * p[1]


@_vjp("mul")
def _b_mul(node, g, vals):
    return (_unbroadcast(g * vals[1], vals[0].shape), _unbroadcast(g * vals[0], vals[1].shape))


@_jvp("mul")
def _t_mul(out, parents, tans):
    ta, tb = tans
    terms = []
    if ta is not None:
        terms.append(mul(ta, parents[1]))
    if tb is not None:
        terms.append(mul(parents[0], tb))
    res = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return _match_tan(res, None, out)


@_primitive("div")
def _v_div(p, aux):
    return p[0] / p[1]


@_vjp("div")
def _b_div(node, g, vals):
    ga = _unbroadcast(g / vals[1], vals[0].shape)
    gb = _unbroadcast(-g * vals[0] / (vals[1] * vals[1]), vals[1].shape)
    return (ga, gb)


@_jvp("div")
def _t_div(out, parents, tans):
    a, b = parents
    ta, tb = tans
    terms = []
    if ta is not None:
        terms.append(div(ta, b))
    if tb is not None:
        terms.append(neg(div(mul(a, tb), square(b))))
    res = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
    return _match_tan(res, None, out)


def add(a, b):
    return _binary("add", a, b)


def sub(a, b):
    return _binary("sub", a, b)


def mul(a, b):
    return _binary("mul", a, b)


def div(a, b):
    return _binary("div", a, b)


@_primitive("neg")
def _v_neg(p, aux):
    return -p[0]


@_vjp("neg")
def _b_neg(node, g, vals):
    return (-g,)


@_jvp("neg")
def _t_neg(out, parents, tans):
    return neg(tans[0])


def neg(a: Var) -> Var:
    return a.tape._emit("neg", -a.value, (a.idx,))


@_primitive("scale")
def _v_scale(p, aux):
    return p[0] * aux


@_vjp("scale")
def _b_scale(node, g, vals):
    return (g * node.aux,)


@_jvp("scale")
def _t_scale(out, parents, tans):
    return scale(tans[0], out.tape.nodes[out.idx].aux)


def scale(a: Var, c: float) -> Var:
    return a.tape._emit("scale", a.value * c, (a.idx,), aux=float(c))


@_primitive("shift")
def _v_shift(p, aux):
    return p[0] + aux


@_vjp("shift")
def _b_shift(node, g, vals):
    return (g,)


@_jvp("shift")
def _t_shift(out, parents, tans):
    return tans[0]


def shift(a: Var, c: float) -> Var:
    return a.tape._emit("shift", a.value + c, (a.idx,), aux=float(c))


@_primitive("cmul")
def _v_cmul(p, aux):
    return p[0] * aux


@_vjp("cmul")
def _b_cmul(node, g, vals):
    return (_unbroadcast(g * node.aux, vals[0].shape),)


@_jvp("cmul")
def _t_cmul(out, parents, tans):
    return cmul(tans[0], out.tape.nodes[out.idx].aux)


def cmul(a: Var, arr: np.ndarray) -> Var:
    """Multiply by a constant array (masks, data-dependent weights)."""
    arr = _as_array(arr)
    _bcast_shape("cmul", a.shape, arr.shape)
    return a.tape._emit("cmul", a.value * arr, (a.idx,), aux=arr)


# -- elementwise nonlinearities ---------------------------------------------


@_primitive("exp")
def _v_exp(p, aux):
    return np.exp(p[0])


@_vjp("exp")
def _b_exp(node, g, vals):
    return (g * node.value,)


@_jvp("exp")
def _t_exp(out, parents, tans):
    return mul(out, tans[0])


def exp(a: Var) -> Var:
    return a.tape._emit("exp", np.exp(a.value), (a.idx,))


@_primitive("log")
def _v_log(p, aux):
    return np.log(p[0])


@_vjp("log")
def _b_log(node, g, vals):
    return (g / vals[0],)


@_jvp("log")
def _t_log(out, parents, tans):
    return div(tans[0], parents[0])


def log(a: Var) -> Var:
    return a.tape._emit("log", np.log(a.value), (a.idx,))


@_primitive("tanh")
def _v_tanh(p, aux):
    return np.tanh(p[0])


@_vjp("tanh")
def _b_tanh(node, g, vals):
    return (g * (1.0 - node.value * node.value),)


@_jvp("tanh")
def _t_tanh(out, parents, tans):
    return mul(shift(neg(square(out)), 1.0), tans[0])


def tanh(a: Var) -> Var:
    return a.tape._emit("tanh", np.tanh(a.value), (a.idx,))


@_primitive("relu")
def _v_relu(p, aux):
    return np.maximum(p[0], 0.0)


@_vjp("relu")
def _b_relu(node, g, vals):
    return (g * node.aux,)


@_jvp("relu")
def _t_relu(out, parents, tans):
    return cmul(tans[0], out.tape.nodes[out.idx].aux)


def relu(a: Var) -> Var:
    mask = (a.value > 0.0).astype(a.value.dtype)
    return a.tape._emit("relu", np.maximum(a.value, 0.0), (a.idx,), aux=mask)


@_primitive("softplus")
def _v_softplus(p, aux):
    return np.logaddexp(0.0, p[0])


@_vjp("softplus")
def _b_softplus(node, g, vals):
    return (g * np.exp(vals[0] - node.value),)  # exp(x - softplus(x)) = sigmoid(x)


@_jvp("softplus")
def _t_softplus(out, parents, tans):
    return mul(exp(sub(parents[0], out)), tans[0])


def softplus(a: Var) -> Var:
    return a.tape._emit("softplus", np.logaddexp(0.0, a.value), (a.idx,))


@_primitive("square")
def _v_square(p, aux):
    return p[0] * p[0]


@_vjp("square")
def _b_square(node, g, vals):
    return (2.0 * g * vals[0],)


@_jvp("square")
def _t_square(out, parents, tans):
    return scale(mul(parents[0], tans[0]), 2.0)


def square(a: Var) -> Var:
    return a.tape._emit("square", a.value * a.value, (a.idx,))


@_primitive("sqrt")
def _v_sqrt(p, aux):
    return np.sqrt(p[0])


@_vjp("sqrt")
def _b_sqrt(node, g, vals):
    return (g / (2.0 * node.value),)


@_jvp("sqrt")
def _t_sqrt(out, parents, tans):
    return div(tans[0], scale(out, 2.0))


def sqrt(a: Var) -> Var:
    return a.tape._emit("sqrt", np.sqrt(a.value), (a.idx,))


@_primitive("clamp_min")
def _v_clamp_min(p, aux):
    return np.maximum(p[0], aux[0])


@_vjp("clamp_min")
def _b_clamp_min(node, g, vals):
    return (g * node.aux[1],)


@_jvp("clamp_min")
def _t_clamp_min(out, parents, tans):
    return cmul(tans[0], out.tape.nodes[out.idx].aux[1])


def clamp_min(a: Var, floor: float) -> Var:
    mask = (a.value > floor).astype(a.value.dtype)
    return a.tape._emit("clamp_min", np.maximum(a.value, floor), (a.idx,), aux=(float(floor), mask))


# -- linear algebra ----------------------------------------------------------


@_primitive("matmul")
def _v_matmul(p, aux):
    return np.matmul(p[0], p[1])


@_vjp("matmul")
def _b_matmul(node, g, vals):
    a, b = vals
    ga = np.matmul(g, np.swapaxes(b, -1, -2)) if b.ndim >= 2 else np.outer(g, b)
    gb = np.matmul(np.swapaxes(a, -1, -2), g) if a.ndim >= 2 else np.outer(a, g)
    return (_reduce_to(ga, a.shape), _reduce_to(gb, b.shape))


@_jvp("matmul")
def _t_matmul(out, parents, tans):
    ta, tb = tans
    terms = []
    if ta is not None:
        terms.append(matmul(ta, parents[1]))
    if tb is not None:
        terms.append(matmul(parents[0], tb))
    return terms[0] if len(terms) == 1 else add(terms[0], terms[1])


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return a.tape._emit("matmul", np.matmul(a.value, b.value), (a.idx, b.idx))


@_primitive("mT")
def _v_mT(p, aux):
    return np.swapaxes(p[0], -1, -2)


@_vjp("mT")
def _b_mT(node, g, vals):
    return (np.swapaxes(g, -1, -2),)


@_jvp("mT")
def _t_mT(out, parents, tans):
    return mT(tans[0])


def mT(a: Var) -> Var:
    return a.tape._emit("mT", np.swapaxes(a.value, -1, -2), (a.idx,))


@_primitive("addouter")
def _v_addouter(p, aux):
    return p[0][..., :, None] + p[1][..., None, :]


@_vjp("addouter")
def _b_addouter(node, g, vals):
    return (_reduce_to(g.sum(axis=-1), vals[0].shape), _reduce_to(g.sum(axis=-2), vals[1].shape))


@_jvp("addouter")
def _t_addouter(out, parents, tans):
    ta, tb = tans
    tape = out.tape
    if ta is None:
        ta = tape.const(np.zeros_like(parents[0].value))
    if tb is None:
        tb = tape.const(np.zeros_like(parents[1].value))
    return addouter(ta, tb)


def addouter(u: Var, v: Var) -> Var:
    """u[..., i] + v[..., j] -> (..., i, j); batch axes must match."""
    if u.shape[:-1] != v.shape[:-1]:
        raise ShapeMismatch(f"addouter: batch dims differ, {u.shape} and {v.shape}")
    return u.tape._emit("addouter", _v_addouter([u.value, v.value], None), (u.idx, v.idx))


def _psolve_value(a: np.ndarray, b: np.ndarray):
    """Cholesky solve on the symmetric part of a, with a jitter ladder
    1e-10..1e-6 applied on factorization failure."""
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    jitters = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6]
    last_err = None
    for j in jitters:
        try:
            m = a if j == 0.0 else a + j * np.eye(a.shape[-1], dtype=a.dtype)
            chol = np.linalg.cholesky(m)
            break
        except np.linalg.LinAlgError as e:  # noqa: PERF203
            last_err = e
    else:
        raise DiffEngineError(f"psolve: matrix not positive definite after jitter ladder: {last_err}")

    def solve_with(rhs):
        if a.ndim == 2:
            y = solve_triangular(chol, rhs, lower=True)
            return solve_triangular(chol.T, y, lower=False)
        flat_l = chol.reshape((-1,) + chol.shape[-2:])
        flat_r = rhs.reshape((-1,) + rhs.shape[-2:])
        out = np.empty_like(flat_r)
        for i in range(flat_l.shape[0]):
            y = solve_triangular(flat_l[i], flat_r[i], lower=True)
            out[i] = solve_triangular(flat_l[i].T, y, lower=False)
        return out.reshape(rhs.shape)

    return solve_with(b), solve_with


@_primitive("psolve")
def _v_psolve(p, aux):
    return _psolve_value(p[0], p[1])[0]


@_vjp("psolve")
def _b_psolve(node, g, vals):
    solve_with = node.aux
    gb = solve_with(g)
    ga = -np.matmul(gb, np.swapaxes(node.value, -1, -2))
    ga = 0.5 * (ga + np.swapaxes(ga, -1, -2))  # op reads only the symmetric part
    return (_reduce_to(ga, vals[0].shape), _reduce_to(gb, vals[1].shape))


@_jvp("psolve")
def _t_psolve(out, parents, tans):
    a, b = parents
    ta, tb = tans
    x = out
    if ta is not None:
        ta_sym = scale(add(ta, mT(ta)), 0.5)
        rhs = sub(tb, matmul(ta_sym, x)) if tb is not None else neg(matmul(ta_sym, x))
    else:
        rhs = tb
    return psolve(a, rhs)


def psolve(a: Var, b: Var) -> Var:
    """Solve a @ x = b for symmetric positive definite a (optionally batched)."""
    if a.shape[-1] != a.shape[-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"psolve: incompatible shapes {a.shape} and {b.shape}")
    val, solve_with = _psolve_value(a.value, b.value)
    return a.tape._emit("psolve", val, (a.idx, b.idx), aux=solve_with)


# -- shape manipulation -------------------------------------------------------


@_primitive("sum")
def _v_sum(p, aux):
    return np.asarray(np.sum(p[0], axis=aux))


@_vjp("sum")
def _b_sum(node, g, vals):
    x = vals[0]
    if node.aux is None:
        return (np.broadcast_to(g, x.shape),)
    return (np.broadcast_to(np.expand_dims(g, node.aux), x.shape),)


@_jvp("sum")
def _t_sum(out, parents, tans):
    return sum_(tans[0], axis=out.tape.nodes[out.idx].aux)


def sum_(a: Var, axis: int | None = None) -> Var:
    if axis is not None:
        axis = axis if axis >= 0 else a.value.ndim + axis
    return a.tape._emit("sum", np.asarray(np.sum(a.value, axis=axis)), (a.idx,), aux=axis)


@_primitive("reshape")
def _v_reshape(p, aux):
    return p[0].reshape(aux)


@_vjp("reshape")
def _b_reshape(node, g, vals):
    return (g.reshape(vals[0].shape),)


@_jvp("reshape")
def _t_reshape(out, parents, tans):
    return reshape(tans[0], out.tape.nodes[out.idx].aux)


def reshape(a: Var, shape) -> Var:
    shape = tuple(shape)
    return a.tape._emit("reshape", a.value.reshape(shape), (a.idx,), aux=shape)


@_primitive("concat")
def _v_concat(p, aux):
    return np.concatenate(p, axis=aux)


@_vjp("concat")
def _b_concat(node, g, vals):
    axis = node.aux
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(vals)))


@_jvp("concat")
def _t_concat(out, parents, tans):
    tape = out.tape
    parts = []
    for p, t in zip(parents, tans):
        parts.append(t if t is not None else tape.const(np.zeros_like(p.value)))
    return concat(parts, axis=tape.nodes[out.idx].aux)


def concat(vars_: list[Var], axis: int = 0) -> Var:
    if not vars_:
        raise DiffEngineError("concat: empty input list")
    tape = vars_[0].tape
    axis = axis if axis >= 0 else vars_[0].value.ndim + axis
    val = np.concatenate([v.value for v in vars_], axis=axis)
    return tape._emit("concat", val, tuple(v.idx for v in vars_), aux=axis)


@_primitive("slice")
def _v_slice(p, aux):
    return p[0][aux]


@_vjp("slice")
def _b_slice(node, g, vals):
    full = np.zeros_like(vals[0])
    full[node.aux] = g
    return (full,)


@_jvp("slice")
def _t_slice(out, parents, tans):
    return slice_(tans[0], out.tape.nodes[out.idx].aux)


def slice_(a: Var, key) -> Var:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) and k is not Ellipsis:
            raise DiffEngineError("slice: only slices and Ellipsis are supported")
    return a.tape._emit("slice", a.value[key], (a.idx,), aux=key)


# ---------------------------------------------------------------------------
# forward / backward / jvp drivers


def forward(graph_fn, store: ParamStore, *inputs):
    """Run graph_fn(tape, bound, *input_vars); returns (output value, tape)."""
    tape = Tape()
    bound = Bound(tape, store)
    in_vars = [tape.const(x) for x in inputs]
    out = graph_fn(tape, bound, *in_vars)
    tape.output = out
    return out.value, tape


def backward(tape: Tape, seed: float = 1.0, out: Var | None = None) -> None:
    """Accumulate d(out)/d(params) into ParamStore gradient slots (+=)."""
    out = out if out is not None else tape.output
    if out is None:
        raise DiffEngineError("backward: tape has no output")
    if out.value.shape != ():
        raise DiffEngineError(f"backward: output must be scalar, got shape {out.value.shape}")
    nodes = tape.nodes
    adj: list[np.ndarray | None] = [None] * (out.idx + 1)
    adj[out.idx] = np.asarray(float(seed), dtype=out.value.dtype)
    for i in range(out.idx, -1, -1):
        g = adj[i]
        adj[i] = None
        if g is None:
            continue
        node = nodes[i]
        if node.op == "leaf":
            if node.aux is not None:
                store, name = node.aux
                store.accumulate_grad(name, g)
            continue
        vals = [nodes[p].value for p in node.parents]
        contribs = _VJP[node.op](node, g, vals)
        for p, c in zip(node.parents, contribs):
            adj[p] = c if adj[p] is None else adj[p] + c


def _match_tan(t: Var, parent: Var | None, out: Var) -> Var:
    """Broadcast a tangent up to the primal output's shape if needed."""
    if t.shape == out.shape:
        return t
    return add(t, t.tape.const(np.zeros_like(out.value)))


def jvp(tape: Tape, outs: list[Var], wrt: Var, seed) -> list[Var]:
    """Forward-mode sweep seeding d(wrt)=seed; tangents are taped Vars, so
    they can be consumed by further ops and differentiated by backward."""
    seed = _as_array(seed)
    if seed.shape != wrt.shape:
        raise ShapeMismatch(f"jvp: seed shape {seed.shape} != {wrt.shape}")
    tangents: dict[int, Var] = {wrt.idx: tape.const(seed)}
    top = max(o.idx for o in outs)
    for i in range(wrt.idx + 1, top + 1):
        node = tape.nodes[i]
        if node.op == "leaf":
            continue
        tans = [tangents.get(p) for p in node.parents]
        if all(t is None for t in tans):
            continue
        parents = [Var(tape, p) for p in node.parents]
        tangents[i] = _JVP[node.op](Var(tape, i), parents, tans)
    results = []
    for o in outs:
        t = tangents.get(o.idx)
        results.append(t if t is not None else tape.const(np.zeros_like(o.value)))
    return results


def time_derivative(graph_fn, store: ParamStore, t) -> np.ndarray:
    """d(graph_fn output)/dt for a scalar time input, via one forward sweep."""
    tape = Tape()
    bound = Bound(tape, store)
    t_var = tape.const(np.asarray(t, dtype=_dtype))
    out = graph_fn(tape, bound, t_var)
    (dout,) = jvp(tape, [out], t_var, np.ones_like(t_var.value))
    return dout.value


def replay_forward(tape: Tape) -> np.ndarray:
    """Recompute every node value from the leaves; bit-identical by design."""
    values: list[np.ndarray] = []
    for node in tape.nodes:
        if node.op == "leaf":
            values.append(node.value)
        else:
            values.append(_VALUE[node.op]([values[p] for p in node.parents], node.aux))
    return values[tape.output.idx] if tape.output is not None else values[-1]


# ---------------------------------------------------------------------------
# checkpoint io: <base>.bin holds, per entry, the name length, name bytes,
# ndim, dims, raw little-endian float64 values; <base>.json is the manifest.


@dataclass
class CheckpointManifest:
    entries: list[dict] = field(default_factory=list)
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(store: ParamStore, base: str, step: int = 0, rng: dict | None = None, extra: dict | None = None) -> None:
    names = store.names()
    with open(f"{base}.bin", "wb") as f:
        for name in names:
            arr = np.asarray(store.value(name), dtype="<f8", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    manifest = {
        "entries": [{"name": n, "shape": list(store.value(n).shape)} for n in names],
        "step": int(step),
        "rng": rng or {},
        "extra": extra or {},
    }
    with open(f"{base}.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_checkpoint(base: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(f"{base}.json") as f:
        manifest = json.load(f)
    entries: dict[str, np.ndarray] = {}
    with open(f"{base}.bin", "rb") as f:
        while True:
            raw = f.read(4)
            if not raw:
                break
            (nlen,) = struct.unpack("<I", raw)
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            entries[name] = data.astype(np.float64)
    declared = {e["name"]: tuple(e["shape"]) for e in manifest["entries"]}
    got = {n: a.shape for n, a in entries.items()}
    if declared != got:
        raise DiffEngineError("checkpoint manifest does not match binary payload")
    return entries, manifest


def restore_into(store: ParamStore, entries: dict[str, np.ndarray]) -> None:
    for name, arr in entries.items():
        if name in store:
            store.set_value(name, arr)
        else:
            store.add(name, arr)
