"""Reverse-mode automatic differentiation over a recorded tape of array ops.

Every value on a :class:`Tape` is a numpy array (0-d for scalars).  Nodes are
appended in creation order, so a node's inputs always precede it and the
reverse sweep is a plain reversed loop.  Ops are evaluated eagerly whenever
all of their inputs already hold values; a tape built over unbound inputs can
be evaluated later with :meth:`Tape.forward_eval`.

The module-level functions (:func:`exp`, :func:`clamp`, :func:`sum`, ...)
accept either :class:`Var` or plain arrays, so model code written against
them runs unchanged with or without a tape.

Example::

    tape = Tape()
    a = tape.input("a", 2.0)
    b = tape.input("b", 3.0)
    c = a * b
    grads = tape.backward(c)      # {"a": 3.0, "b": 2.0}
"""

from __future__ import annotations

import builtins
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, StateError

__all__ = [
    "Tape", "Var", "ParameterStore", "GradCheckReport",
    "adam_step", "grad_check",
    "exp", "log", "sigmoid", "relu", "softplus", "clamp", "maximum", "minimum",
    "sum", "mean", "matmul", "gather", "reshape", "concat", "cumsum",
    "stop_gradient", "less",
]


# ---------------------------------------------------------------------------
# primitive table

def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _bw_add(g, out, a, b, needs):
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None)


def _bw_sub(g, out, a, b, needs):
    return (_unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None)


def _bw_mul(g, out, a, b, needs):
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _bw_div(g, out, a, b, needs):
    return (_unbroadcast(g / b, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b, b.shape) if needs[1] else None)


def _bw_maximum(g, out, a, b, needs):
    # ties go to the first argument
    pick = a >= b
    return (_unbroadcast(np.where(pick, g, 0), a.shape) if needs[0] else None,
            _unbroadcast(np.where(pick, 0, g), b.shape) if needs[1] else None)


def _bw_minimum(g, out, a, b, needs):
    pick = a <= b
    return (_unbroadcast(np.where(pick, g, 0), a.shape) if needs[0] else None,
            _unbroadcast(np.where(pick, 0, g), b.shape) if needs[1] else None)


def _fw_sum(a, axis=None, keepdims=False):
    return np.sum(a, axis=axis, keepdims=keepdims)


def _bw_sum(g, out, a, needs, axis=None, keepdims=False):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).copy(),)


def _fw_mean(a, axis=None, keepdims=False):
    return np.mean(a, axis=axis, keepdims=keepdims)


def _bw_mean(g, out, a, needs, axis=None, keepdims=False):
    count = a.size // max(out.size, 1)
    return (_bw_sum(g / count, out, a, needs, axis=axis, keepdims=keepdims)[0],)


def _bw_matmul(g, out, a, b, needs):
    return (g @ b.T if needs[0] else None, a.T @ g if needs[1] else None)


def _bw_gather(g, out, table, needs, index):
    rows = table.shape[0]
    flat_idx = index.reshape(-1)
    g2 = g.reshape(flat_idx.size, -1)
    grad = np.empty((rows, g2.shape[1]), dtype=table.dtype)
    for col in range(g2.shape[1]):
        grad[:, col] = np.bincount(flat_idx, weights=g2[:, col], minlength=rows)
    return (grad.reshape(table.shape),)


def _fw_interp(table, index, weights):
    return np.einsum("...kf,...k->...f", table[index], weights, optimize=False)


def _bw_interp(g, out, table, needs, index, weights):
    flat_idx = index.reshape(-1)
    grad = np.empty(table.shape, dtype=table.dtype)
    for col in range(table.shape[1]):
        contrib = (g[..., col, None] * weights).reshape(-1)
        grad[:, col] = np.bincount(flat_idx, weights=contrib, minlength=table.shape[0])
    return (grad,)


def _fw_cumsum(a, axis=-1, exclusive=False):
    c = np.cumsum(a, axis=axis)
    if exclusive:
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)),
                            np.delete(c, -1, axis=axis)], axis=axis)
    return c


def _bw_cumsum(g, out, a, needs, axis=-1, exclusive=False):
    rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
    if exclusive:
        # d out_i / d a_j = 1 for i > j
        rev = rev - g
    return (rev,)


def _fw_concat(*vals, axis=0):
    return np.concatenate(vals, axis=axis)


def _bw_concat(g, out, *vals_and_needs, axis=0):
    vals, needs = vals_and_needs[:-1], vals_and_needs[-1]
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parts = np.split(g, cuts, axis=axis)
    return tuple(p if n else None for p, n in zip(parts, needs))


def _bw_getitem(g, out, a, needs, index):
    z = np.zeros_like(a)
    z[index] += g
    return (z,)


@dataclass(frozen=True)
class _Prim:
    forward: Callable
    backward: Callable | None


_PRIMS: dict[str, _Prim] = {
    "add": _Prim(np.add, _bw_add),
    "sub": _Prim(np.subtract, _bw_sub),
    "mul": _Prim(np.multiply, _bw_mul),
    "div": _Prim(np.divide, _bw_div),
    "neg": _Prim(np.negative, lambda g, out, a, needs: (-g,)),
    "exp": _Prim(np.exp, lambda g, out, a, needs: (g * out,)),
    "log": _Prim(np.log, lambda g, out, a, needs: (g / a,)),
    "pow": _Prim(lambda a, p: np.power(a, p),
                 lambda g, out, a, needs, p: (g * p * np.power(a, p - 1),)),
    "maximum": _Prim(np.maximum, _bw_maximum),
    "minimum": _Prim(np.minimum, _bw_minimum),
    "clamp": _Prim(lambda a, lo, hi: np.clip(a, lo, hi),
                   lambda g, out, a, needs, lo, hi: (g * ((a >= lo) & (a <= hi)),)),
    "sigmoid": _Prim(_sigmoid, lambda g, out, a, needs: (g * out * (1 - out),)),
    "relu": _Prim(lambda a: np.maximum(a, 0), lambda g, out, a, needs: (g * (a > 0),)),
    "softplus": _Prim(lambda a: np.logaddexp(0, a),
                      lambda g, out, a, needs: (g * _sigmoid(a),)),
    "sum": _Prim(_fw_sum, _bw_sum),
    "mean": _Prim(_fw_mean, _bw_mean),
    "matmul": _Prim(np.matmul, _bw_matmul),
    "gather": _Prim(lambda t, index: t[index], _bw_gather),
    "interp": _Prim(_fw_interp, _bw_interp),
    "reshape": _Prim(lambda a, shape: np.reshape(a, shape),
                     lambda g, out, a, needs, shape: (g.reshape(a.shape),)),
    "getitem": _Prim(lambda a, index: a[index], _bw_getitem),
    "concat": _Prim(_fw_concat, _bw_concat),
    "cumsum": _Prim(_fw_cumsum, _bw_cumsum),
    "stop_gradient": _Prim(lambda a: a.copy(), None),
    "less": _Prim(lambda a, b: (a < b).astype(a.dtype), None),
}


# ---------------------------------------------------------------------------
# tape

@dataclass
class _Node:
    kind: str                      # "input" | "param" | "const" | "op"
    op: str | None = None
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    value: np.ndarray | None = None
    needs_grad: bool = False
    grad_buffer: np.ndarray | None = None


class Tape:
    """Ordered record of primitive applications.

    ``dtype`` is applied to every input, parameter and constant, so mixing a
    float32 training tape with float64 literals never silently upcasts.

    Outputs of non-differentiable ops (stop_gradient, less) are collected in
    ``detached`` in creation order.  Passing such a list as ``replay`` makes
    a later tape reuse those values, which freezes every detached branch.
    """

    def __init__(self, dtype=np.float64, check_finite=True, replay=None):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.detached: list[np.ndarray] = []
        self._replay = replay
        self.nodes: list[_Node] = []
        self._names: dict[str, int] = {}
        self.adjoints: list | None = None

    def __len__(self):
        return len(self.nodes)

    # leaves
    def _leaf(self, kind, name, value, grad_buffer=None):
        if name is not None:
            if name in self._names:
                raise ConfigError(f"duplicate leaf name {name!r}")
            self._names[name] = len(self.nodes)
        if value is not None:
            value = np.asarray(value, dtype=self.dtype)
        self.nodes.append(_Node(kind, name=name, value=value,
                                needs_grad=kind != "const", grad_buffer=grad_buffer))
        return Var(self, len(self.nodes) - 1)

    def input(self, name, value=None):
        """Bindable leaf; ``value`` may be supplied later through forward_eval."""
        return self._leaf("input", name, value)

    def param(self, name, value, grad=None):
        """Trainable leaf reading ``value`` in place.

        If ``grad`` is given, backward() adds this leaf's adjoint into it.
        """
        var = self._leaf("param", name, None, grad_buffer=grad)
        self.nodes[var.id].value = value if np.asarray(value).dtype == self.dtype \
            else np.asarray(value, dtype=self.dtype)
        return var

    def const(self, value):
        return self._leaf("const", None, value)

    # ops
    def apply(self, op, *args, **attrs):
        prim = _PRIMS[op]
        ids = []
        for a in args:
            if not isinstance(a, Var):
                a = self.const(a)
            elif a.tape is not self:
                raise ConfigError("cannot mix variables from different tapes")
            ids.append(a.id)
        needs = any(self.nodes[i].needs_grad for i in ids) and prim.backward is not None
        node = _Node("op", op=op, inputs=tuple(ids), attrs=attrs, needs_grad=needs)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        vals = [self.nodes[i].value for i in ids]
        if all(v is not None for v in vals):
            node.value = self._eval(nid, prim, vals, attrs)
            if prim.backward is None:
                k = len(self.detached)
                if self._replay is not None:
                    if k >= len(self._replay) or self._replay[k].shape != node.value.shape:
                        raise ConfigError("replayed tape diverged from the recorded one")
                    node.value = self._replay[k]
                self.detached.append(node.value)
        return Var(self, nid)

    def _eval(self, nid, prim, vals, attrs):
        with np.errstate(all="ignore"):
            out = np.asarray(prim.forward(*vals, **attrs))
        if out.dtype != self.dtype and np.issubdtype(out.dtype, np.floating):
            out = out.astype(self.dtype)
        if self.check_finite and not np.all(np.isfinite(out)):
            node = self.nodes[nid]
            raise NumericError(f"non-finite value produced by {node.op!r}", where=nid)
        return out

    def forward_eval(self, bindings=None, outputs=()):
        """Re-run every op node with ``bindings`` for the named inputs.

        Parameters are re-read from their (possibly updated) arrays.  Returns
        the values of ``outputs`` in the order given.
        """
        if not self.nodes:
            raise ConfigError("empty tape")
        bindings = dict(bindings or {})
        unknown = set(bindings) - set(self._names)
        if unknown:
            raise ConfigError(f"unknown inputs: {sorted(unknown)}")
        for nid, node in enumerate(self.nodes):
            if node.kind == "input":
                if node.name in bindings:
                    node.value = np.asarray(bindings[node.name], dtype=self.dtype)
                elif node.value is None:
                    raise ConfigError(f"input {node.name!r} is unbound")
            elif node.kind == "op":
                prim = _PRIMS[node.op]
                node.value = self._eval(nid, prim, [self.nodes[i].value for i in node.inputs],
                                        node.attrs)
        self.adjoints = None
        return [self.nodes[v.id].value for v in outputs]

    def backward(self, output, seed=None):
        """Accumulate adjoints from ``output`` back to every leaf.

        Returns a dict mapping each named leaf to its gradient.  Parameter
        leaves created with a ``grad`` buffer also get the adjoint added
        into that buffer.
        """
        out_node = self.nodes[output.id]
        if out_node.value is None:
            raise StateError("backward() called before forward evaluation")
        if seed is None:
            seed = np.ones_like(out_node.value)
        seed = np.asarray(seed, dtype=self.dtype)
        if not np.all(np.isfinite(seed)):
            raise NumericError("non-finite seed gradient")
        adj = [None] * (output.id + 1)
        adj[output.id] = np.broadcast_to(seed, out_node.value.shape).copy()
        for nid in range(output.id, -1, -1):
            g = adj[nid]
            node = self.nodes[nid]
            if g is None or node.kind != "op" or not node.needs_grad:
                continue
            prim = _PRIMS[node.op]
            vals = [self.nodes[i].value for i in node.inputs]
            if any(v is None for v in vals):
                raise StateError(f"node {nid} has no forward value")
            needs = tuple(self.nodes[i].needs_grad for i in node.inputs)
            grads = prim.backward(g, node.value, *vals, needs, **node.attrs)
            for i, gi in zip(node.inputs, grads):
                if gi is None or not self.nodes[i].needs_grad:
                    continue
                adj[i] = gi if adj[i] is None else adj[i] + gi
        self.adjoints = adj
        result = {}
        for name, nid in self._names.items():
            node = self.nodes[nid]
            g = adj[nid] if nid < len(adj) else None
            if g is None:
                g = np.zeros(np.shape(node.value), dtype=self.dtype) \
                    if node.value is not None else None
            result[name] = g
            if node.grad_buffer is not None and nid < len(adj) and adj[nid] is not None:
                node.grad_buffer += adj[nid].astype(node.grad_buffer.dtype, copy=False)
        return result


class Var:
    """Handle to one tape node, with arithmetic operator overloading."""

    __slots__ = ("tape", "id")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape, nid):
        self.tape = tape
        self.id = nid

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, kind={node.op or node.kind}, shape={np.shape(node.value)})"

    def __add__(self, o): return self.tape.apply("add", self, o)
    def __radd__(self, o): return self.tape.apply("add", o, self)
    def __sub__(self, o): return self.tape.apply("sub", self, o)
    def __rsub__(self, o): return self.tape.apply("sub", o, self)
    def __mul__(self, o): return self.tape.apply("mul", self, o)
    def __rmul__(self, o): return self.tape.apply("mul", o, self)
    def __truediv__(self, o): return self.tape.apply("div", self, o)
    def __rtruediv__(self, o): return self.tape.apply("div", o, self)
    def __neg__(self): return self.tape.apply("neg", self)
    def __matmul__(self, o): return self.tape.apply("matmul", self, o)
    def __rmatmul__(self, o): return self.tape.apply("matmul", o, self)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        return self.tape.apply("pow", self, p=float(p))

    def __getitem__(self, index):
        return self.tape.apply("getitem", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return self.tape.apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.apply("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.apply("reshape", self, shape=shape)


# ---------------------------------------------------------------------------
# dispatching helpers: Var -> tape op, anything else -> numpy

def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def exp(x):
    t = _tape_of(x)
    return t.apply("exp", x) if t else np.exp(x)


def log(x):
    t = _tape_of(x)
    return t.apply("log", x) if t else np.log(x)


def sigmoid(x):
    t = _tape_of(x)
    return t.apply("sigmoid", x) if t else _sigmoid(np.asarray(x))


def relu(x):
    t = _tape_of(x)
    return t.apply("relu", x) if t else np.maximum(x, 0)


def softplus(x):
    t = _tape_of(x)
    return t.apply("softplus", x) if t else np.logaddexp(0, x)


def clamp(x, lo=-np.inf, hi=np.inf):
    """Clip to [lo, hi]; the derivative is 1 inside (inclusive) and 0 outside."""
    t = _tape_of(x)
    return t.apply("clamp", x, lo=lo, hi=hi) if t else np.clip(x, lo, hi)


def maximum(a, b):
    t = _tape_of(a, b)
    return t.apply("maximum", a, b) if t else np.maximum(a, b)


def minimum(a, b):
    t = _tape_of(a, b)
    return t.apply("minimum", a, b) if t else np.minimum(a, b)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    t = _tape_of(x)
    return t.apply("sum", x, axis=axis, keepdims=keepdims) if t \
        else np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    t = _tape_of(x)
    return t.apply("mean", x, axis=axis, keepdims=keepdims) if t \
        else np.mean(x, axis=axis, keepdims=keepdims)


def matmul(a, b):
    t = _tape_of(a, b)
    return t.apply("matmul", a, b) if t else np.matmul(a, b)


def gather(table, index):
    """Rows ``table[index]``; the backward pass scatter-adds into those rows only."""
    t = _tape_of(table)
    index = np.asarray(index)
    return t.apply("gather", table, index=index) if t else np.asarray(table)[index]


def interp(table, index, weights):
    """Weighted row blend ``sum_k weights[..., k] * table[index[..., k]]``.

    Same as gather + multiply + sum over the corner axis, fused; ``weights``
    are constants.
    """
    t = _tape_of(table)
    index = np.asarray(index)
    if t:
        weights = np.asarray(weights, dtype=t.dtype)
        return t.apply("interp", table, index=index, weights=weights)
    table = np.asarray(table)
    return _fw_interp(table, index, np.asarray(weights, dtype=table.dtype))


def reshape(x, shape):
    t = _tape_of(x)
    return t.apply("reshape", x, shape=tuple(shape)) if t else np.reshape(x, shape)


def concat(xs, axis=0):
    t = _tape_of(*xs)
    return t.apply("concat", *xs, axis=axis) if t else np.concatenate(xs, axis=axis)


def cumsum(x, axis=-1, exclusive=False):
    t = _tape_of(x)
    return t.apply("cumsum", x, axis=axis, exclusive=exclusive) if t \
        else _fw_cumsum(np.asarray(x), axis=axis, exclusive=exclusive)


def stop_gradient(x):
    t = _tape_of(x)
    return t.apply("stop_gradient", x) if t else x


def less(a, b):
    """Indicator ``a < b`` as 0/1 floats; never carries gradient."""
    t = _tape_of(a, b)
    if t:
        return t.apply("less", a, b)
    a = np.asarray(a)
    return (a < b).astype(a.dtype if np.issubdtype(a.dtype, np.floating) else float)


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


# ---------------------------------------------------------------------------
# parameters and optimizer

class ParameterStore:
    """Flat parameter vector with named views, gradients and Adam moments.

    All four vectors always share one length.  ``groups`` tags each named
    block (e.g. ``"grid"`` / ``"mlp"``) so callers can build per-group
    learning rates with :meth:`group_mask`.
    """

    def __init__(self, arrays, groups=None, dtype=np.float32):
        groups = groups or {}
        self.dtype = np.dtype(dtype)
        self.layout = {}
        offset = 0
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            self.layout[name] = (offset, arr.shape, groups.get(name, "default"))
            offset += arr.size
        self.params = np.empty(offset, dtype=self.dtype)
        for name, arr in arrays.items():
            self[name][...] = arr
        self.grad = np.zeros_like(self.params)
        self.m = np.zeros_like(self.params)
        self.v = np.zeros_like(self.params)
        self.step = 0

    def __len__(self):
        return self.params.size

    def names(self):
        return list(self.layout)

    def _view(self, vec, name):
        off, shape, _ = self.layout[name]
        return vec[off:off + int(np.prod(shape, dtype=np.int64))].reshape(shape)

    def __getitem__(self, name):
        return self._view(self.params, name)

    def grad_view(self, name):
        return self._view(self.grad, name)

    def slice_of(self, name):
        off, shape, _ = self.layout[name]
        return slice(off, off + int(np.prod(shape, dtype=np.int64)))

    def group_mask(self, group):
        mask = np.zeros(self.params.size, dtype=bool)
        for name, (_, _, g) in self.layout.items():
            if g == group:
                mask[self.slice_of(name)] = True
        return mask

    def attach(self, tape):
        """Register every block as a param leaf on ``tape`` (grads flow into ``self.grad``)."""
        return {name: tape.param(name, self[name], grad=self.grad_view(name))
                for name in self.layout}

    def split(self, flat):
        """Named reshaped views of a flat vector or flat Var, using this layout."""
        out = {}
        for name, (_, shape, _) in self.layout.items():
            sl = self.slice_of(name)
            if isinstance(flat, Var):
                out[name] = flat[sl].reshape(shape)
            else:
                out[name] = np.asarray(flat)[sl].reshape(shape)
        return out

    def zero_grad(self):
        self.grad[...] = 0

    def copy(self, dtype=None):
        other = ParameterStore.__new__(ParameterStore)
        other.dtype = np.dtype(dtype or self.dtype)
        other.layout = dict(self.layout)
        other.params = self.params.astype(other.dtype)
        other.grad = self.grad.astype(other.dtype)
        other.m = self.m.astype(other.dtype)
        other.v = self.v.astype(other.dtype)
        other.step = self.step
        return other


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update in place; clears the gradients.

    ``lr`` is a scalar or a per-parameter vector.  A non-finite gradient
    raises :class:`NumericError` and leaves the store untouched.
    """
    g = store.grad
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.isfinite(g))[0])
        raise NumericError("non-finite gradient; Adam step refused", where=bad)
    store.step += 1
    t = store.step
    store.m *= beta1
    store.m += (1 - beta1) * g
    store.v *= beta2
    store.v += (1 - beta2) * g * g
    mhat = store.m / (1 - beta1 ** t)
    vhat = store.v / (1 - beta2 ** t)
    store.params -= (np.asarray(lr, dtype=store.dtype) * mhat / (np.sqrt(vhat) + eps)).astype(store.dtype)
    store.grad[...] = 0
    return store


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray
    coordinates: np.ndarray
    directional_rel_error: float = 0.0


def _rel_err(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(function, point, h=1e-5, tolerance=1e-6, coords=None, floor=1e-8,
               directional=False, rng=None, freeze_detached=False):
    """Compare backward() of ``function`` with central differences.

    ``function(tape, x)`` must build a scalar on ``tape`` from the input Var
    ``x``.  The step for coordinate i is ``h * max(1, |x_i|)``; the relative
    error is ``|a - n| / max(|a|, |n|, floor)``.  Only ``coords`` are checked
    when given.  With ``directional=True`` a random-direction derivative over
    all coordinates is compared as well.  With ``freeze_detached=True`` the
    differenced function keeps every stop_gradient/less output at its value
    from ``point``, which is the function backward() actually differentiates.
    Failures are reported, never raised.
    """
    x0 = np.array(point, dtype=np.float64)
    flat = x0.reshape(-1)

    tape = Tape(np.float64)
    y = function(tape, tape.input("x", x0))
    frozen = tape.detached if freeze_detached else None

    def evaluate(x):
        t = Tape(np.float64, check_finite=False, replay=frozen)
        return float(function(t, t.input("x", x)).value)

    analytic_full = tape.backward(y)["x"].reshape(-1)

    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        step = h * builtins.max(1.0, abs(flat[i]))
        xp = flat.copy(); xp[i] += step
        xm = flat.copy(); xm[i] -= step
        numeric[k] = (evaluate(xp.reshape(x0.shape)) - evaluate(xm.reshape(x0.shape))) / (2 * step)
    analytic = analytic_full[idx]
    errs = _rel_err(analytic, numeric, floor)
    worst = int(np.argmax(errs)) if errs.size else 0
    max_err = float(errs[worst]) if errs.size else 0.0

    dir_err = 0.0
    if directional:
        rng = np.random.default_rng(rng)
        v = rng.standard_normal(flat.size)
        v /= np.linalg.norm(v)
        step = h * builtins.max(1.0, float(np.max(np.abs(flat))))
        fd = (evaluate((flat + step * v).reshape(x0.shape))
              - evaluate((flat - step * v).reshape(x0.shape))) / (2 * step)
        dir_err = float(_rel_err(analytic_full @ v, fd, floor))
        max_err = builtins.max(max_err, dir_err)

    return GradCheckReport(
        max_rel_error=max_err,
        worst_coordinate=int(idx[worst]) if idx.size else -1,
        passed=bool(math.isfinite(max_err) and max_err <= tolerance),
        analytic=analytic, numeric=numeric, coordinates=idx,
        directional_rel_error=dir_err,
    )
