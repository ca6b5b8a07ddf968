"""Reverse-mode automatic differentiation on dense numpy arrays.

A ``Tape`` records primitive operations in execution order (which is a
topological order by construction, since a node can only consume already
existing nodes). ``Tape.backward`` walks the record once in reverse and
accumulates gradients, so every node is visited exactly once and the
reduction order is fixed -> gradients are bitwise deterministic.

Operands can be ``Var`` (tracked) or plain ndarrays / scalars (constants,
no gradient). All values are float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "add",
    "sub",
    "mul",
    "matmul",
    "affine",
    "tanh",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "put_rows",
    "add_rows",
    "norm2_rows",
    "sum_all",
]


class TapeConsumedError(RuntimeError):
    """Raised when backward is called twice on the same tape."""


class Var:
    """A tape-tracked array value."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Operation record for one forward pass.

    With ``record_ops=False`` the tape runs the same forward code but keeps
    no record (and cannot be differentiated); intermediates are freed as
    soon as the caller drops them, which is what evaluation passes want.
    """

    def __init__(self, record_ops: bool = True):
        self.record_ops = record_ops
        self._entries: list = []  # (parent_indices, backward_fn) per node
        self._n_nodes = 0
        self._consumed = False

    def leaf(self, value) -> Var:
        """Track ``value`` as an input node (parameters, data needing grads)."""
        arr = np.asarray(value, dtype=np.float64)
        return self._record(arr, (), None)

    def _record(self, value, parents, backward) -> Var:
        if not self.record_ops:
            return Var(value, self, -1)
        idx = self._n_nodes
        self._n_nodes += 1
        self._entries.append((tuple(p.index for p in parents), backward))
        return Var(value, self, idx)

    def backward(self, root: Var, seed=None) -> "Gradients":
        """Propagate d(root)/d(node) to every recorded node.

        ``seed`` defaults to 1.0 and must match the root's shape otherwise.
        """
        if not self.record_ops:
            raise TapeConsumedError("tape was created with record_ops=False")
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        self._consumed = True
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        grads: list = [None] * self._n_nodes
        if seed is None:
            seed = np.ones_like(root.value)
        grads[root.index] = np.asarray(seed, dtype=np.float64)
        for idx in range(root.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            parent_ids, backward = self._entries[idx]
            if backward is None:
                continue
            for pid, pg in zip(parent_ids, backward(g)):
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        return Gradients(grads)


class Gradients:
    """Read-only view of the gradient buffers produced by one backward pass."""

    def __init__(self, buffers):
        self._buffers = buffers

    def of(self, var: Var) -> np.ndarray:
        g = self._buffers[var.index]
        if g is None:
            return np.zeros_like(var.value)
        return g


def _tape_of(*operands) -> Tape:
    for x in operands:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _val(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _tracked(x) -> bool:
    return isinstance(x, Var)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(a, b, out, grad_a, grad_b):
    tape = _tape_of(a, b)
    parents = []
    takes = []
    if _tracked(a):
        parents.append(a)
        takes.append(grad_a)
    if _tracked(b):
        parents.append(b)
        takes.append(grad_b)

    def backward(g):
        return tuple(f(g) for f in takes)

    return tape._record(out, parents, backward)


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {av.shape} @ {bv.shape}")
    return _binary(
        a, b, av @ bv,
        lambda g: g @ bv.T,
        lambda g: av.T @ g,
    )


def affine(x, w, b) -> Var:
    """Fused ``x @ w + b`` with ``b`` a 1-d bias row."""
    xv, wv, bv = _val(x), _val(w), _val(b)
    out = xv @ wv + bv
    tape = _tape_of(x, w, b)
    parents = []
    takes = []
    if _tracked(x):
        parents.append(x)
        takes.append(lambda g: g @ wv.T)
    if _tracked(w):
        parents.append(w)
        takes.append(lambda g: xv.T @ g)
    if _tracked(b):
        parents.append(b)
        takes.append(lambda g: g.sum(axis=0))

    def backward(g):
        return tuple(f(g) for f in takes)

    return tape._record(out, parents, backward)


def tanh(x) -> Var:
    if not _tracked(x):
        raise TypeError("tanh on a constant: apply np.tanh directly")
    out = np.tanh(x.value)

    def backward(g):
        return (g * (1.0 - out * out),)

    return x.tape._record(out, (x,), backward)


def concat_cols(parts) -> Var:
    """Concatenate 2-d blocks along axis 1; constants are allowed."""
    tape = _tape_of(*parts)
    values = [_val(p) for p in parts]
    out = np.concatenate(values, axis=1)
    widths = [v.shape[1] for v in values]
    offsets = np.cumsum([0] + widths)
    parents = []
    spans = []
    for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
        if _tracked(p):
            parents.append(p)
            spans.append((int(lo), int(hi)))

    def backward(g):
        return tuple(g[:, lo:hi] for lo, hi in spans)

    return tape._record(out, parents, backward)


def slice_cols(x: Var, lo: int, hi: int) -> Var:
    out = x.value[:, lo:hi].copy()

    def backward(g):
        full = np.zeros_like(x.value)
        full[:, lo:hi] = g
        return (full,)

    return x.tape._record(out, (x,), backward)


def gather_rows(x: Var, rows: np.ndarray) -> Var:
    """Select rows (unique indices) from a 2-d Var."""
    out = x.value[rows]

    def backward(g):
        full = np.zeros_like(x.value)
        full[rows] = g
        return (full,)

    return x.tape._record(out, (x,), backward)


def put_rows(base, rows: np.ndarray, values: Var) -> Var:
    """Copy of ``base`` with ``rows`` replaced by ``values`` (unique indices)."""
    out = _val(base).copy()
    out[rows] = values.value
    tape = values.tape
    parents = [values]
    base_tracked = _tracked(base)
    if base_tracked:
        parents.append(base)

    def backward(g):
        g_values = g[rows]
        if base_tracked:
            g_base = g.copy()
            g_base[rows] = 0.0
            return (g_values, g_base)
        return (g_values,)

    return tape._record(out, parents, backward)


def add_rows(base, rows: np.ndarray, values: Var) -> Var:
    """Copy of ``base`` with ``values`` added into ``rows`` (unique indices)."""
    out = _val(base).copy()
    out[rows] += values.value
    tape = values.tape
    parents = [values]
    base_tracked = _tracked(base)
    if base_tracked:
        parents.append(base)

    def backward(g):
        g_values = g[rows]
        if base_tracked:
            return (g_values, g)
        return (g_values,)

    return tape._record(out, parents, backward)


def norm2_rows(x: Var) -> Var:
    """Row-wise Euclidean norm of a 2-d Var, shape (rows, 1).

    The gradient at an exactly-zero row is taken as 0 (a valid subgradient);
    values are exact, no epsilon is folded into the norm itself.
    """
    out = np.sqrt(np.sum(x.value * x.value, axis=1, keepdims=True))

    def backward(g):
        denom = np.where(out > 0.0, out, 1.0)
        return (g * x.value / denom,)

    return x.tape._record(out, (x,), backward)


def sum_all(x: Var) -> Var:
    out = np.asarray(x.value.sum())

    def backward(g):
        return (np.full(x.value.shape, float(g)),)

    return x.tape._record(out, (x,), backward)
