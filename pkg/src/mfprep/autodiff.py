"""Taped reverse-mode differentiation over real and complex numpy arrays.

Complex values are differentiated as pairs of independent reals. The
adjoint stored for a complex node ``z = x + iy`` is ``dL/dx + i dL/dy``, so
for a holomorphic step ``z = f(w)`` the rule is ``g_w = g_z * conj(f'(w))``
and for a real input ``a`` feeding ``z = f(a)`` it is ``Re(conj(g_z) f'(a))``.

Usage::

    with Tape() as tape:
        w = tape.variable(w0)
        loss = trace_real(matmul(w, w))
    grads = tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numba
import numpy as np

from . import tensor as tc

_state = threading.local()


class AutodiffError(ValueError):
    pass


class Node:
    """A value on (or off) a tape. ``grad`` is filled by ``Tape.backward``."""

    __slots__ = ("value", "grad", "parents", "vjp", "requires_grad", "op", "__weakref__")

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, op="const"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return scale(-1.0, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.ops: list[Node] = []
        self.leaves: list[Node] = []
        self._used = False

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def variable(self, value) -> Node:
        node = Node(np.array(value, copy=True), requires_grad=True, op="leaf")
        self.leaves.append(node)
        return node

    def backward(self, loss: Node, seed: float = 1.0) -> dict[int, np.ndarray]:
        """Accumulate d(seed*loss)/d(leaf) into every leaf; returns ``{id(leaf): grad}``."""
        if self._used:
            raise AutodiffError("tape already consumed by a backward pass")
        if not isinstance(loss, Node):
            raise AutodiffError("loss must be a Node")
        if np.ndim(loss.value) != 0:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        if np.iscomplexobj(loss.value):
            raise AutodiffError("loss must be real")
        self._used = True
        for leaf in self.leaves:
            leaf.grad = np.zeros_like(leaf.value)
        if not loss.requires_grad:
            return {id(leaf): leaf.grad for leaf in self.leaves}
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=float)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, gp in zip(node.parents, node.vjp(g)):
                if gp is None or not parent.requires_grad:
                    continue
                gp = _fit(gp, parent.value)
                if parent.vjp is None:
                    parent.grad = parent.grad + gp
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + gp
                else:
                    grads[id(parent)] = gp
        return {id(leaf): leaf.grad for leaf in self.leaves}


def current_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _fit(g, like):
    """Sum broadcast axes away and drop imaginary parts for real targets."""
    g = np.asarray(g)
    shape = np.shape(like)
    if g.shape != shape:
        extra = g.ndim - len(shape)
        if extra > 0:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        g = g.reshape(shape)
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        g = g.real
    return g


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(np.asarray(x))


def value(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def _emit(op: str, out, parents: Sequence[Node], vjp: Callable) -> Node:
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Node(out, op=op)
    node = Node(out, tuple(parents), vjp, True, op)
    tape.ops.append(node)
    return node


# -- primitives --------------------------------------------------------------


def add(a, b):
    a, b = as_node(a), as_node(b)
    return _emit("add", a.value + b.value, (a, b), lambda g: (g, g))


def subtract(a, b):
    a, b = as_node(a), as_node(b)
    return _emit("subtract", a.value - b.value, (a, b), lambda g: (g, -g))


def scale(alpha, a):
    """Multiply by a constant scalar."""
    a = as_node(a)
    return _emit("scale", alpha * a.value, (a,), lambda g: (g * np.conj(alpha),))


def multiply(a, b):
    """Elementwise (broadcasting) product."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return _emit("multiply", av * bv, (a, b), lambda g: (g * np.conj(bv), g * np.conj(av)))


def divide(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit("divide", out, (a, b), lambda g: (g / np.conj(bv), -g * np.conj(out / bv)))


def matmul(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[-2]:
        raise tc.ShapeError(f"matmul: {av.shape} @ {bv.shape}")

    def vjp(g):
        ga = g @ np.conj(np.swapaxes(bv, -1, -2))
        gb = np.conj(np.swapaxes(av, -1, -2)) @ g
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), vjp)


def kron(a, b):
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    (ra, ca), (rb, cb) = av.shape[-2:], bv.shape[-2:]

    def vjp(g):
        g4 = g.reshape(*g.shape[:-2], ra, rb, ca, cb)
        ga = np.einsum("...ikjl,...kl->...ij", g4, np.conj(bv))
        gb = np.einsum("...ikjl,...ij->...kl", g4, np.conj(av))
        return ga, gb

    return _emit("kron", tc.kron(av, bv), (a, b), vjp)


def partial_trace(m, n_qubits: int, keep):
    """Differentiable partial trace; the adjoint tensors the cotangent with identity."""
    m = as_node(m)
    keep = sorted(set(keep))
    out = tc.partial_trace(m.value, n_qubits, keep)
    traced = [q for q in range(n_qubits) if q not in keep]

    def vjp(g):
        lead = g.shape[:-2]
        k = len(keep)
        gk = g.reshape(*lead, *(2,) * (2 * k))
        # broadcast g over traced qubits with a delta on each traced pair
        full = np.ones((1,) * len(lead) + (1,) * (2 * n_qubits), dtype=g.dtype)
        for q in traced:
            shape = [1] * (2 * n_qubits)
            shape[q] = 2
            shape[n_qubits + q] = 2
            full = full * np.eye(2).reshape((1,) * len(lead) + tuple(shape))
        shape = [1] * (2 * n_qubits)
        for i, q in enumerate(keep):
            shape[q] = 2
            shape[n_qubits + q] = 2
        gk = gk.reshape(*lead, *shape)
        res = full * gk
        return (res.reshape(*lead, 2**n_qubits, 2**n_qubits),)

    return _emit("partial_trace", out, (m,), vjp)


def trace_real(a):
    """Re Tr over the last two axes."""
    a = as_node(a)
    av = a.value
    n = av.shape[-1]

    def vjp(g):
        eye = np.eye(n)
        return (np.asarray(g)[..., None, None] * eye,)

    return _emit("trace_real", np.real(np.trace(av, axis1=-2, axis2=-1)), (a,), vjp)


def real(a):
    a = as_node(a)
    return _emit("real", np.real(a.value), (a,), lambda g: (np.real(g).astype(complex),))


def conj(a):
    a = as_node(a)
    return _emit("conj", np.conj(a.value), (a,), lambda g: (np.conj(g),))


def adjoint(a):
    a = as_node(a)
    return _emit("adjoint", tc.adjoint(a.value), (a,), lambda g: (tc.adjoint(g),))


def sin(a):
    a = as_node(a)
    av = a.value
    return _emit("sin", np.sin(av), (a,), lambda g: (g * np.conj(np.cos(av)),))


def cos(a):
    a = as_node(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.conj(np.sin(av)),))


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a):
    a = as_node(a)
    av = a.value
    return _emit("log", np.log(av), (a,), lambda g: (g / np.conj(av),))


def rotation(angles, pauli: str):
    """exp(i*angle/2*sigma) for each angle; output shape ``angles.shape + (2, 2)``."""
    a = as_node(angles)
    sigma = tc.PAULI[pauli]
    half = 0.5 * np.asarray(a.value, dtype=float)
    c = np.cos(half)[..., None, None]
    s = np.sin(half)[..., None, None]
    out = c * tc.I2 + 1j * s * sigma

    def vjp(g):
        # d/dangle exp(i angle/2 sigma) = (i/2) sigma exp(i angle/2 sigma)
        deriv = 0.5j * (sigma @ out)
        return (np.real(np.sum(np.conj(g) * deriv, axis=(-2, -1))),)

    return _emit("rotation", out, (a,), vjp)


def concatenate(parts, axis=-1):
    nodes = [as_node(p) for p in parts]
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concatenate", out, nodes, vjp)


def slice_(a, idx):
    """Basic or advanced indexing; the adjoint scatter-adds."""
    a = as_node(a)
    av = a.value
    out = av[idx]

    basic = _is_basic(idx)

    def vjp(g):
        full = np.zeros(av.shape, dtype=np.result_type(av, g))
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", out, (a,), vjp)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def take(a, indices, axis=0):
    """Gather along one axis; repeated indices accumulate in the adjoint."""
    a = as_node(a)
    av = a.value
    indices = np.asarray(indices, dtype=int)
    out = np.take(av, indices, axis=axis)
    ax = axis % av.ndim

    def vjp(g):
        full = np.zeros(av.shape, dtype=np.result_type(av, g))
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, ax, 0)
        if len(indices) == 0:
            return (full,)
        order = np.argsort(indices, kind="stable")
        idx = indices[order]
        starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
        if len(starts) == len(idx):
            moved[idx] = gm[order]
        else:
            moved[idx[starts]] = np.add.reduceat(gm[order], starts, axis=0)
        return (full,)

    return _emit("take", out, (a,), vjp)


@numba.njit(cache=True, nogil=True)
def _gate_forward(g, v):
    nb, nl, _, nr = v.shape
    out = np.empty_like(v)
    for b in range(nb):
        g00, g01, g10, g11 = g[b, 0, 0], g[b, 0, 1], g[b, 1, 0], g[b, 1, 1]
        for l in range(nl):
            for r in range(nr):
                a0 = v[b, l, 0, r]
                a1 = v[b, l, 1, r]
                out[b, l, 0, r] = g00 * a0 + g01 * a1
                out[b, l, 1, r] = g10 * a0 + g11 * a1
    return out


@numba.njit(cache=True, nogil=True)
def _gate_backward(g, v, go):
    nb, nl, _, nr = v.shape
    gv = np.empty_like(v)
    gg = np.zeros((nb, 2, 2), dtype=np.complex128)
    for b in range(nb):
        c00, c01 = np.conj(g[b, 0, 0]), np.conj(g[b, 0, 1])
        c10, c11 = np.conj(g[b, 1, 0]), np.conj(g[b, 1, 1])
        s00 = s01 = s10 = s11 = 0j
        for l in range(nl):
            for r in range(nr):
                o0 = go[b, l, 0, r]
                o1 = go[b, l, 1, r]
                a0 = np.conj(v[b, l, 0, r])
                a1 = np.conj(v[b, l, 1, r])
                gv[b, l, 0, r] = c00 * o0 + c10 * o1
                gv[b, l, 1, r] = c01 * o0 + c11 * o1
                s00 += o0 * a0
                s01 += o0 * a1
                s10 += o1 * a0
                s11 += o1 * a1
        gg[b, 0, 0] = s00
        gg[b, 0, 1] = s01
        gg[b, 1, 0] = s10
        gg[b, 1, 1] = s11
    return gg, gv


def apply_gate(gate, v):
    """Batched 2x2 gates (B, 2, 2) acting on axis 2 of v (B, L, 2, R)."""
    gate, v = as_node(gate), as_node(v)
    gv, vv = gate.value, v.value
    if gv.shape[-2:] != (2, 2) or vv.ndim != 4 or vv.shape[2] != 2 or gv.shape[0] != vv.shape[0]:
        raise tc.ShapeError(f"apply_gate: gate {gv.shape}, state {vv.shape}")
    gc = np.ascontiguousarray(gv, dtype=complex).reshape(-1, 2, 2)
    vc = np.ascontiguousarray(vv, dtype=complex)
    out = _gate_forward(gc, vc)

    def vjp(go):
        gg, gvv = _gate_backward(gc, vc, np.ascontiguousarray(go, dtype=complex))
        return gg.reshape(gv.shape), gvv

    return _emit("apply_gate", out, (gate, v), vjp)


def reshape(a, shape):
    a = as_node(a)
    old = a.value.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_node(a)
    inv = np.argsort(axes)
    return _emit("transpose", np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def sum_(a, axis=None):
    a = as_node(a)
    av = a.value
    out = np.sum(av, axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape),)
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % av.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), av.shape),)

    return _emit("sum", out, (a,), vjp)


def mean(a, axis=None):
    a = as_node(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return scale(1.0 / count, sum_(a, axis))


def einsum(subscripts: str, *operands):
    """Multilinear contraction. Each operand's indices must appear in the output or another operand."""
    nodes = [as_node(o) for o in operands]
    vals = [n.value for n in nodes]
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    for k, sub in enumerate(in_subs):
        others = set(out_sub).union(*(set(s) for j, s in enumerate(in_subs) if j != k))
        if not set(sub) <= others or len(set(sub)) != len(sub):
            raise AutodiffError(f"einsum operand {k} ({sub}) not supported for differentiation")
    out = np.einsum(subscripts, *vals, optimize=len(vals) > 2)

    def vjp(g):
        grads = []
        for k, sub in enumerate(in_subs):
            if not nodes[k].requires_grad:
                grads.append(None)
                continue
            spec = ",".join([out_sub] + [s for j, s in enumerate(in_subs) if j != k]) + "->" + sub
            args = [g] + [np.conj(v) for j, v in enumerate(vals) if j != k]
            grads.append(np.einsum(spec, *args, optimize=len(args) > 2))
        return tuple(grads)

    return _emit("einsum", out, nodes, vjp)


_RECORDABLE = {
    "add": add,
    "subtract": subtract,
    "scalar-multiply": scale,
    "elementwise-multiply": multiply,
    "divide": divide,
    "matmul": matmul,
    "kron": kron,
    "partial-trace": partial_trace,
    "trace-real-part": trace_real,
    "adjoint": adjoint,
    "conj": conj,
    "real": real,
    "sin": sin,
    "cos": cos,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "log": log,
    "rotation": rotation,
    "concatenate": concatenate,
    "slice": slice_,
    "take": take,
    "apply-gate": apply_gate,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "einsum": einsum,
}


def record(op_kind: str, inputs, *args, **kwargs) -> Node:
    """Dispatch a primitive by name: ``record("add", [x, y])``."""
    try:
        fn = _RECORDABLE[op_kind]
    except KeyError:
        raise AutodiffError(f"unsupported op-kind {op_kind!r}") from None
    if op_kind == "scalar-multiply":
        alpha, a = inputs
        return fn(value(alpha), a)
    if op_kind == "concatenate":
        return fn(list(inputs), *args, **kwargs)
    if op_kind == "einsum":
        return fn(args[0], *inputs)
    return fn(*inputs, *args, **kwargs)
