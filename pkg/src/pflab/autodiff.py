"""Tape-based reverse-mode automatic differentiation on numpy values.

The engine records every primitive operation on an explicit :class:`Tape`.
A reverse sweep (:func:`gradient`) walks the tape backwards and, when asked
to (``create_graph=True``), expresses the sweep itself in terms of the same
primitives so the result is again differentiable.  That nesting is what lets
an optimizer backpropagate through a Hutchinson trace estimate embedded in
an unrolled ODE solve.

Values are numpy float64 scalars, vectors, or matrices.  Elementwise
binary primitives require equal shapes on any operand that receives a
gradient; scalar-times-vector products go through :func:`scale`.  Arrays
held by a ``Var`` are treated as immutable.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "constant",
    "gradient",
    "jacobian",
    "AdamState",
    "adam_init",
    "adam_step",
    "NonFiniteError",
    "ShapeError",
    "TapeError",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "square",
    "vsum",
    "dot",
    "scale",
    "matvec",
    "vecmat",
    "matmul",
    "outer",
    "transpose",
    "affine",
    "clip_stopgrad",
    "expand",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced a NaN or infinity."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with a primitive's contract."""


class TapeError(RuntimeError):
    """Tape misuse: mixing tapes, or differentiating off-tape values."""


_STATE = threading.local()


def _stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def _active():
    stack = _stack()
    return stack[-1] if stack else None


class _Push:
    """Pushes a tape (or None to suspend recording) for the duration."""

    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        _stack().append(self.tape)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Node:
    """One recorded primitive: enough to replay forward and to run a VJP."""

    __slots__ = ("op", "parents", "const_vals", "aux", "value", "vjp")

    def __init__(self, op, parents, const_vals, aux, value, vjp):
        self.op = op
        self.parents = parents          # node id per operand, -1 for constants
        self.const_vals = const_vals    # operand value if constant, else None
        self.aux = aux                  # extra data needed to replay forward
        self.value = value
        self.vjp = vjp                  # callable(adjoint, wanted) -> contributions


class Var:
    """A value observed by the tape.  ``nid < 0`` marks an untracked constant."""

    __slots__ = ("value", "tape", "nid", "requires_grad")

    def __init__(self, value, tape=None, nid=-1, requires_grad=False):
        self.value = value
        self.tape = tape
        self.nid = nid
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        tag = f"@{self.nid}" if self.tape is not None else "const"
        return f"Var({self.value!r}, {tag})"

    # Arithmetic sugar; delegates to the primitives below.
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of primitives.  Use as a context manager.

    Node ids are creation order, so every node's inputs precede it and a
    reverse id scan is a valid reverse-topological order even after backward
    sweeps append their own nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        top = _stack().pop()
        if top is not self:  # pragma: no cover - defensive
            raise TapeError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad=True):
        """Register an input value as a tracked leaf node."""
        value = _coerce(value)
        _check_finite(value, "leaf")
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), (), (), value, None))
        return Var(value, self, nid, requires_grad)

    def emit(self, op, value, operands, vjp_builder, aux=()):
        parents = []
        const_vals = []
        for p in operands:
            if p.tape is self:
                parents.append(p.nid)
                const_vals.append(None)
            elif p.tape is None:
                parents.append(-1)
                const_vals.append(p.value)
            else:
                raise TapeError(f"operand of '{op}' belongs to a different tape")
        nid = len(self.nodes)
        out = Var(value, self, nid)
        self.nodes.append(
            Node(op, tuple(parents), tuple(const_vals), aux, value, vjp_builder(out))
        )
        return out

    def replay(self):
        """Re-run every node forward and check values are reproduced bit-exactly.

        Returns the number of nodes checked; raises TapeError on any mismatch.
        """
        values = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                values[i] = node.value
                continue
            args = [
                values[p] if p >= 0 else c
                for p, c in zip(node.parents, node.const_vals)
            ]
            redo = _REPLAY[node.op](args, node.aux)
            if np.shape(redo) != np.shape(node.value) or not np.array_equal(
                np.asarray(redo), np.asarray(node.value)
            ):
                raise TapeError(f"replay mismatch at node {i} ({node.op})")
            values[i] = redo
        return len(self.nodes)


def _coerce(value):
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        return value
    return np.asarray(value, dtype=np.float64)


def constant(value):
    """Wrap a raw value as an untracked constant Var."""
    return Var(_coerce(value))


def _as_var(x):
    return x if isinstance(x, Var) else Var(_coerce(x))


def _check_finite(value, op):
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite result in '{op}'")


def _result(op, value, operands, vjp_builder, aux=()):
    """Wrap a computed value; record it if any operand lives on the active tape."""
    _check_finite(value, op)
    tape = _active()
    if tape is None:
        return Var(value)
    tracked = False
    for p in operands:
        if p.tape is tape:
            tracked = True
        elif p.tape is not None:
            raise TapeError(f"operand of '{op}' belongs to a different tape")
    if not tracked:
        return Var(value)
    return tape.emit(op, value, operands, vjp_builder, aux)


def _guard_elementwise(op, out_shape, operands):
    # A gradient-receiving operand must already have the output's shape:
    # implicit broadcasting is only allowed against constants.
    tape = _active()
    if tape is None:
        return
    for p in operands:
        if p.tape is tape and np.shape(p.value) != out_shape:
            raise ShapeError(
                f"'{op}' would broadcast a tracked operand of shape "
                f"{np.shape(p.value)} to {out_shape}; use scale/expand instead"
            )


# ---------------------------------------------------------------------------
# Primitives.  Each VJP receives the adjoint plus a per-operand `wanted`
# mask and computes only the requested contributions.


def add(a, b):
    a, b = _as_var(a), _as_var(b)
    value = a.value + b.value
    _guard_elementwise("add", np.shape(value), (a, b))

    def vjps(out):
        return lambda u, w: (u if w[0] else None, u if w[1] else None)

    return _result("add", value, (a, b), vjps)


def sub(a, b):
    a, b = _as_var(a), _as_var(b)
    value = a.value - b.value
    _guard_elementwise("sub", np.shape(value), (a, b))

    def vjps(out):
        return lambda u, w: (u if w[0] else None, neg(u) if w[1] else None)

    return _result("sub", value, (a, b), vjps)


def mul(a, b):
    a, b = _as_var(a), _as_var(b)
    value = a.value * b.value
    _guard_elementwise("mul", np.shape(value), (a, b))

    def vjps(out):
        return lambda u, w: (
            mul(u, b) if w[0] else None,
            mul(u, a) if w[1] else None,
        )

    return _result("mul", value, (a, b), vjps)


def div(a, b):
    a, b = _as_var(a), _as_var(b)
    value = a.value / b.value
    _guard_elementwise("div", np.shape(value), (a, b))

    def vjps(out):
        return lambda u, w: (
            div(u, b) if w[0] else None,
            neg(div(mul(u, a), square(b))) if w[1] else None,
        )

    return _result("div", value, (a, b), vjps)


def neg(a):
    a = _as_var(a)

    def vjps(out):
        return lambda u, w: (neg(u),)

    return _result("neg", -a.value, (a,), vjps)


def exp(a):
    a = _as_var(a)

    def vjps(out):
        return lambda u, w: (mul(u, out),)

    return _result("exp", np.exp(a.value), (a,), vjps)


def log(a):
    a = _as_var(a)

    def vjps(out):
        return lambda u, w: (div(u, a),)

    return _result("log", np.log(a.value), (a,), vjps)


def tanh(a):
    a = _as_var(a)

    def vjps(out):
        return lambda u, w: (mul(u, sub(1.0, mul(out, out))),)

    return _result("tanh", np.tanh(a.value), (a,), vjps)


def square(a):
    a = _as_var(a)

    def vjps(out):
        return lambda u, w: (mul(mul(u, a), 2.0),)

    return _result("square", a.value * a.value, (a,), vjps)


def vsum(a):
    """Sum over the trailing axis (full reduction for vectors)."""
    a = _as_var(a)
    if np.ndim(a.value) == 0:
        return a
    n = np.shape(a.value)[-1]
    value = np.sum(a.value, axis=-1)

    def vjps(out):
        return lambda u, w: (expand(u, n),)

    return _result("vsum", value, (a,), vjps, aux=(n,))


def expand(a, n):
    """Broadcast along a new trailing axis of length ``n`` (adjoint of vsum)."""
    a = _as_var(a)
    value = np.asarray(a.value)[..., None] * np.ones(n)

    def vjps(out):
        return lambda u, w: (vsum(u),)

    return _result("expand", value, (a,), vjps, aux=(n,))


def dot(a, b):
    """Inner product against a 1-D vector ``b``; ``a`` may carry batch axes."""
    a, b = _as_var(a), _as_var(b)
    if np.ndim(b.value) != 1:
        raise ShapeError("dot: second operand must be 1-D")
    if np.shape(a.value)[-1] != np.shape(b.value)[0]:
        raise ShapeError(
            f"dot: length mismatch {np.shape(a.value)} vs {np.shape(b.value)}"
        )
    value = np.matmul(a.value, b.value)

    def vjps(out):
        return lambda u, w: (
            scale(u, b) if w[0] else None,
            scale(u, a) if w[1] else None,
        )

    return _result("dot", value, (a, b), vjps)


def scale(s, v):
    """Product of a scalar ``s`` (batch axes allowed) with a vector ``v``."""
    s, v = _as_var(s), _as_var(v)
    if np.ndim(v.value) > 1:
        raise ShapeError("scale: vector operand must be at most 1-D")
    sv = np.asarray(s.value)
    value = (sv[..., None] if np.ndim(v.value) == 1 else sv) * v.value

    def vjps(out):
        def vjp(u, w):
            gs = None
            if w[0]:
                gs = dot(u, v) if np.ndim(v.value) == 1 else mul(u, v)
            gv = None
            if w[1]:
                # A batched adjoint (extra leading axes) only occurs in
                # non-recording sweeps, where plain broadcasting is exact.
                if np.ndim(u.value) == np.ndim(v.value):
                    gv = scale(s, u)
                else:
                    gv = mul(s, u)
            return (gs, gv)

        return vjp

    return _result("scale", value, (s, v), vjps)


def matvec(w, x):
    """``w @ x`` with a 1-D ``x``; ``w`` may carry leading batch axes."""
    w, x = _as_var(w), _as_var(x)
    if np.ndim(w.value) < 2 or np.ndim(x.value) != 1:
        raise ShapeError("matvec expects a matrix and a vector")
    if np.shape(w.value)[-1] != np.shape(x.value)[0]:
        raise ShapeError(
            f"matvec: {np.shape(w.value)} incompatible with {np.shape(x.value)}"
        )
    value = np.matmul(w.value, x.value)

    def vjps(out):
        return lambda u, want: (
            outer(u, x) if want[0] else None,
            vecmat(u, w) if want[1] else None,
        )

    return _result("matvec", value, (w, x), vjps)


def vecmat(v, w):
    """``v @ w``; either operand may carry leading batch axes."""
    v, w = _as_var(v), _as_var(w)
    if np.ndim(w.value) < 2 or np.shape(v.value)[-1] != np.shape(w.value)[-2]:
        raise ShapeError(
            f"vecmat: {np.shape(v.value)} incompatible with {np.shape(w.value)}"
        )
    value = np.matmul(v.value, w.value)

    def vjps(out):
        return lambda u, want: (
            vecmat(u, transpose(w)) if want[0] else None,
            outer(v, u) if want[1] else None,
        )

    return _result("vecmat", value, (v, w), vjps)


def matmul(a, b):
    """Strict 2-D matrix product (batched training paths)."""
    a, b = _as_var(a), _as_var(b)
    if np.ndim(a.value) != 2 or np.ndim(b.value) != 2:
        raise ShapeError("matmul expects two matrices")
    if np.shape(a.value)[1] != np.shape(b.value)[0]:
        raise ShapeError(
            f"matmul: {np.shape(a.value)} incompatible with {np.shape(b.value)}"
        )
    value = a.value @ b.value

    def vjps(out):
        return lambda u, want: (
            matmul(u, transpose(b)) if want[0] else None,
            matmul(transpose(a), u) if want[1] else None,
        )

    return _result("matmul", value, (a, b), vjps)


def outer(a, b):
    """Outer product of vectors; either side may carry leading batch axes."""
    a, b = _as_var(a), _as_var(b)
    if np.ndim(a.value) < 1 or np.ndim(b.value) < 1:
        raise ShapeError("outer expects two vectors")
    value = np.asarray(a.value)[..., :, None] * np.asarray(b.value)[..., None, :]

    def vjps(out):
        return lambda u, w: (
            matvec(u, b) if w[0] else None,
            vecmat(a, u) if w[1] else None,
        )

    return _result("outer", value, (a, b), vjps)


def transpose(w):
    w = _as_var(w)
    if np.ndim(w.value) < 2:
        raise ShapeError("transpose expects a matrix")
    value = np.swapaxes(w.value, -1, -2)

    def vjps(out):
        return lambda u, want: (transpose(u),)

    return _result("transpose", value, (w,), vjps)


def affine(w, x, b):
    """``w @ x + b`` as one primitive (dense layer)."""
    w, x, b = _as_var(w), _as_var(x), _as_var(b)
    if np.ndim(w.value) != 2 or np.ndim(x.value) != 1 or np.ndim(b.value) != 1:
        raise ShapeError("affine expects (matrix, vector, vector)")
    if np.shape(w.value) != (np.shape(b.value)[0], np.shape(x.value)[0]):
        raise ShapeError(
            f"affine: {np.shape(w.value)} incompatible with x{np.shape(x.value)}, "
            f"b{np.shape(b.value)}"
        )
    value = w.value @ x.value + b.value

    def vjps(out):
        return lambda u, want: (
            outer(u, x) if want[0] else None,
            vecmat(u, w) if want[1] else None,
            u if want[2] else None,
        )

    return _result("affine", value, (w, x, b), vjps)


def clip_stopgrad(a, lo, hi):
    """Clamp to [lo, hi]; gradients pass straight through inside the box
    (boundary inclusive) and are zero outside."""
    a = _as_var(a)
    lo, hi = float(lo), float(hi)
    value = np.clip(a.value, lo, hi)

    def vjps(out):
        mask = Var(((a.value >= lo) & (a.value <= hi)).astype(np.float64))
        return lambda u, w: (mul(u, mask),)

    return _result("clip_stopgrad", value, (a,), vjps, aux=(lo, hi))


_REPLAY = {
    "add": lambda v, aux: v[0] + v[1],
    "sub": lambda v, aux: v[0] - v[1],
    "mul": lambda v, aux: v[0] * v[1],
    "div": lambda v, aux: v[0] / v[1],
    "neg": lambda v, aux: -v[0],
    "exp": lambda v, aux: np.exp(v[0]),
    "log": lambda v, aux: np.log(v[0]),
    "tanh": lambda v, aux: np.tanh(v[0]),
    "square": lambda v, aux: v[0] * v[0],
    "vsum": lambda v, aux: np.sum(v[0], axis=-1),
    "expand": lambda v, aux: np.asarray(v[0])[..., None] * np.ones(aux[0]),
    "dot": lambda v, aux: np.matmul(v[0], v[1]),
    "scale": lambda v, aux: (
        np.asarray(v[0])[..., None] if np.ndim(v[1]) == 1 else np.asarray(v[0])
    )
    * v[1],
    "matvec": lambda v, aux: np.matmul(v[0], v[1]),
    "matmul": lambda v, aux: v[0] @ v[1],
    "vecmat": lambda v, aux: np.matmul(v[0], v[1]),
    "outer": lambda v, aux: np.asarray(v[0])[..., :, None]
    * np.asarray(v[1])[..., None, :],
    "transpose": lambda v, aux: np.swapaxes(v[0], -1, -2),
    "affine": lambda v, aux: v[0] @ v[1] + v[2],
    "clip_stopgrad": lambda v, aux: np.clip(v[0], aux[0], aux[1]),
}


# ---------------------------------------------------------------------------
# Reverse sweeps.


def _sweep(output, inputs, seed_adjoint, create_graph):
    tape = output.tape
    nodes = tape.nodes
    limit = output.nid + 1

    needed = bytearray(limit)
    lowest = limit
    input_ids = set()
    for x in inputs:
        needed[x.nid] = 1
        input_ids.add(x.nid)
        lowest = min(lowest, x.nid)
    for i in range(lowest + 1, limit):
        for p in nodes[i].parents:
            if p >= 0 and needed[p]:
                needed[i] = 1
                break

    adjoints: list = [None] * limit
    adjoints[output.nid] = seed_adjoint

    # A non-recording sweep masks the tape; a create_graph sweep records the
    # backward primitives on the output's own tape.  Nothing below the lowest
    # input can carry an adjoint, so the walk stops there.
    with _Push(tape if create_graph else None):
        for i in range(output.nid, lowest - 1, -1):
            u = adjoints[i]
            if u is None:
                continue
            if i not in input_ids:
                adjoints[i] = None
            node = nodes[i]
            if node.vjp is None:
                continue
            parents = node.parents
            wanted = tuple(p >= 0 and needed[p] != 0 for p in parents)
            if True not in wanted:
                continue
            contribs = node.vjp(u, wanted)
            for p, want, c in zip(parents, wanted, contribs):
                if not want or c is None:
                    continue
                prev = adjoints[p]
                adjoints[p] = c if prev is None else add(prev, c)

    grads = []
    for x in inputs:
        g = adjoints[x.nid]
        if g is None:
            g = Var(np.zeros_like(np.asarray(x.value)))
        grads.append(g)
    return grads


def gradient(output, inputs, create_graph=False):
    """Reverse-mode gradients of a scalar ``output`` w.r.t. values on its tape.

    ``inputs`` are usually leaves but may be intermediates (the adjoint at
    that node is returned).  With ``create_graph=True`` the sweep is recorded
    on the same tape, so the returned gradients can be differentiated again.
    """
    if not isinstance(output, Var):
        raise TapeError("gradient output must be a Var")
    if np.ndim(output.value) != 0:
        raise ShapeError("gradient output must be scalar")
    inputs = list(inputs)
    if output.tape is None:
        return [Var(np.zeros_like(np.asarray(x.value))) for x in inputs]
    for x in inputs:
        if x.tape is not output.tape:
            raise TapeError("gradient input is not on the output's tape")
    return _sweep(output, inputs, Var(np.float64(1.0)), create_graph)


def jacobian(output, wrt):
    """Full Jacobian d(output)/d(wrt) via one batched reverse sweep.

    Seeds the sweep with an identity matrix of covectors, so the adjoint of
    every intermediate carries a leading batch axis.  Never recorded; returns
    a plain (len(output), len(wrt)) array.
    """
    if np.ndim(output.value) != 1:
        raise ShapeError("jacobian output must be a vector")
    if output.tape is None or wrt.tape is not output.tape:
        raise TapeError("jacobian operands must share a tape")
    n = np.shape(output.value)[0]
    seed = Var(np.eye(n))
    (g,) = _sweep(output, [wrt], seed, create_graph=False)
    value = np.asarray(g.value)
    if value.ndim == 1:  # output disconnected from wrt
        value = np.zeros((n, np.shape(wrt.value)[0]))
    return value


# ---------------------------------------------------------------------------
# Adam (bias-corrected, epsilon added outside the bias correction).


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(params):
    params = np.asarray(params, dtype=np.float64)
    return AdamState(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError("adam_step: params/grads/state shapes differ")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, step)
