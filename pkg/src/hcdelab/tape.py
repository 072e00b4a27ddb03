"""Reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records the forward arithmetic executed inside its context;
:func:`backward_gradients` replays it in reverse to produce a gradient for
every parameter that participated. Tensors are immutable values: optimizers
return fresh tensors instead of mutating data in place, and a tensor created
under one tape is treated as a constant by any other tape.

The op set is deliberately small: elementwise arithmetic with numpy-style
broadcasting, 2-D matmul, fused linear combinations (for Runge-Kutta stage
updates), the two contractions the CDE stack needs, and a handful of shape
ops. No GPU, no float32, no generic einsum.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

__all__ = [
    "Tape",
    "Tensor",
    "TapeError",
    "as_tensor",
    "backward_gradients",
    "concat_last",
    "field_apply",
    "knot_eval",
    "lincomb",
    "matmul",
    "mean_axis0",
    "reshape",
    "sigmoid",
    "silu",
    "sqrt",
    "stack_axis1",
    "sum_all",
    "tanh",
]


class TapeError(RuntimeError):
    """Misuse of the tape: shape mismatch, non-scalar loss, reused tape."""


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape():
    """Tape of the innermost enclosing ``with Tape():`` block, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable float64 array, optionally tracked on the active tape.

    ``requires_grad`` marks a leaf parameter: the first op that consumes it
    under a recording tape registers it, and ``backward_gradients`` reports
    its gradient. Intermediate results carry the (tape, node id) that
    produced them.
    """

    __slots__ = ("data", "requires_grad", "tape", "nid")

    def __init__(self, data, requires_grad=False, tape=None, nid=None):
        # immutability is by convention: backward closures alias .data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = " grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # arithmetic sugar; implementations below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Records ops for one forward pass; single-shot backward."""

    def __init__(self):
        self._links = []  # per node: list of (parent_nid, vjp)
        self._leaves = {}  # Tensor (identity) -> leaf nid
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise TapeError("tape context stack corrupted")
        return False

    def __len__(self):
        return len(self._links)

    def _leaf_id(self, t: Tensor) -> int:
        nid = self._leaves.get(t)
        if nid is None:
            nid = len(self._links)
            self._links.append([])
            self._leaves[t] = nid
        return nid

    def _emit(self, links) -> int:
        nid = len(self._links)
        self._links.append(links)
        return nid


def _node_of(tape: Tape, x) -> int | None:
    """Node id of x on this tape; registers parameter leaves lazily."""
    if not isinstance(x, Tensor):
        return None
    if x.tape is tape and x.nid is not None:
        return x.nid
    if x.requires_grad:
        return tape._leaf_id(x)
    return None


def _record(data: np.ndarray, pairs) -> Tensor:
    """pairs: (tensor_or_array, vjp) — links the on-tape inputs, if any."""
    tape = active_tape()
    if tape is None:
        return Tensor(data)
    links = []
    for x, vjp in pairs:
        nid = _node_of(tape, x)
        if nid is not None:
            links.append((nid, vjp))
    if not links:
        return Tensor(data)
    return Tensor(data, tape=tape, nid=tape._emit(links))


def backward_gradients(tape: Tape, loss: Tensor, params=None) -> dict:
    """Gradients of a scalar loss w.r.t. every parameter recorded on the tape.

    Returns ``{parameter Tensor: ndarray}``. Parameters that were recorded
    but do not influence the loss get exact zeros; so do any extra tensors
    passed via ``params``. The tape is consumed: a second backward raises.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise TapeError("loss must be a scalar Tensor")
    if loss.tape is not tape or loss.nid is None:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    grads = [None] * len(tape._links)
    grads[loss.nid] = np.ones_like(loss.data)
    for nid in range(loss.nid, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        for pnid, vjp in tape._links[nid]:
            contrib = vjp(g)
            if grads[pnid] is None:
                grads[pnid] = contrib
            else:
                grads[pnid] = grads[pnid] + contrib

    out = {}
    for t, nid in tape._leaves.items():
        g = grads[nid]
        out[t] = np.zeros_like(t.data) if g is None else np.asarray(g)
    if params is not None:
        for t in params:
            if t not in out:
                out[t] = np.zeros_like(t.data)
    return out


# ------------------------------------------------------------------ helpers

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------- elementwise binary

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data
    return _record(data, [
        (a, lambda g, s=a.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.shape: _unbroadcast(g, s)),
    ])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data
    return _record(data, [
        (a, lambda g, s=a.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.shape: -_unbroadcast(g, s)),
    ])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data
    return _record(data, [
        (a, lambda g, o=b.data, s=a.shape: _unbroadcast(g * o, s)),
        (b, lambda g, o=a.data, s=b.shape: _unbroadcast(g * o, s)),
    ])


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data
    return _record(data, [
        (a, lambda g, o=b.data, s=a.shape: _unbroadcast(g / o, s)),
        (b, lambda g, n=a.data, o=b.data, s=b.shape:
            _unbroadcast(-g * n / (o * o), s)),
    ])


# --------------------------------------------------------------- unary ops

def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, [(x, lambda g, y=y: g * (1.0 - y * y))])


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)
    return _record(y, [(x, lambda g, y=y: g * y * (1.0 - y))])


def silu(x) -> Tensor:
    """x * sigmoid(x), with the closed-form derivative s(x)(1 + x(1 - s(x)))."""
    x = as_tensor(x)
    s = expit(x.data)
    y = x.data * s
    return _record(y, [(x, lambda g, s=s, xd=x.data: g * s * (1.0 + xd * (1.0 - s)))])


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _record(y, [(x, lambda g, y=y: g * 0.5 / y)])


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _record(y, [(x, lambda g, y=y: g * y)])


# -------------------------------------------------------------- reductions

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum())
    return _record(data, [(x, lambda g, s=x.shape: np.broadcast_to(g, s).copy())])


def mean_axis0(x) -> Tensor:
    """Mean over the leading axis (batch statistics for normalization)."""
    x = as_tensor(x)
    n = x.shape[0]
    data = x.data.mean(axis=0)
    return _record(data, [
        (x, lambda g, n=n, s=x.shape: np.broadcast_to(g / n, s).copy()),
    ])


# --------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _record(data, [(x, lambda g, s=x.shape: g.reshape(s))])


def concat_last(parts) -> Tensor:
    """Concatenate along the last axis."""
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=-1)
    pairs = []
    lo = 0
    for p in parts:
        hi = lo + p.shape[-1]
        pairs.append((p, lambda g, lo=lo, hi=hi: g[..., lo:hi]))
        lo = hi
    return _record(data, pairs)


def stack_axis1(parts) -> Tensor:
    """Stack equally shaped (B, c) tensors into (B, n, c)."""
    parts = [as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts], axis=1)
    pairs = [(p, lambda g, i=i: g[:, i, :]) for i, p in enumerate(parts)]
    return _record(data, pairs)


# ------------------------------------------------------------ contractions

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise TapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise TapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data
    return _record(data, [
        (a, lambda g, o=b.data: g @ o.T),
        (b, lambda g, o=a.data: o.T @ g),
    ])


def lincomb(tensors, coeffs) -> Tensor:
    """sum_i coeffs[i] * tensors[i] with scalar coefficients, fused.

    One tape node regardless of the number of terms; this is what keeps
    Runge-Kutta stage combinations cheap to record.
    """
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise TapeError("lincomb operands must share a shape")
    coeffs = [float(c) for c in coeffs]
    data = coeffs[0] * tensors[0].data
    for t, c in zip(tensors[1:], coeffs[1:]):
        if c != 0.0:
            data = data + c * t.data
    pairs = [(t, lambda g, c=c: c * g) for t, c in zip(tensors, coeffs)]
    return _record(np.asarray(data), pairs)


def knot_eval(knots, weights) -> Tensor:
    """Contract spline knot values (B, n, c) with constant weights (n,) -> (B, c).

    The weight vector encodes a natural-cubic-spline evaluation (value or
    derivative) at one query time; gradients flow into the knot values only.
    """
    knots = as_tensor(knots)
    w = np.asarray(weights, dtype=np.float64)
    if knots.ndim != 3 or w.ndim != 1 or knots.shape[1] != w.shape[0]:
        raise TapeError(f"knot_eval shape mismatch: {knots.shape} vs {w.shape}")
    data = np.einsum("bnc,n->bc", knots.data, w)
    return _record(data, [
        (knots, lambda g, w=w: np.einsum("bc,n->bnc", g, w)),
    ])


def field_apply(field_flat, dx, out_dim) -> Tensor:
    """CDE field response: reshape (B, m*c) to (B, m, c) and contract with dx (B, c)."""
    field_flat = as_tensor(field_flat)
    dx = as_tensor(dx)
    b, mc = field_flat.shape
    c = dx.shape[-1]
    if dx.shape[0] != b or mc != out_dim * c:
        raise TapeError(
            f"field_apply shape mismatch: field {field_flat.shape}, dx {dx.shape}, m={out_dim}")
    f3 = field_flat.data.reshape(b, out_dim, c)
    data = np.einsum("bmc,bc->bm", f3, dx.data)
    return _record(data, [
        (field_flat, lambda g, o=dx.data, b=b, mc=mc:
            np.einsum("bm,bc->bmc", g, o).reshape(b, mc)),
        (dx, lambda g, f3=f3: np.einsum("bmc,bm->bc", f3, g)),
    ])
