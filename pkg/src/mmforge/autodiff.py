"""Minimal dense float64 tensor engine with reverse-mode differentiation.

Forward ops execute eagerly on numpy arrays and append their vector-Jacobian
closures to the active :class:`GradTape`. The tape is a flat, topologically
ordered op list; ``backward`` replays it in exact reverse record order, which
makes gradient computation deterministic by construction. A central
finite-difference oracle (`finite_diff_grad`) is provided to validate every
differentiable op and loss independently of the tape.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .errors import DegenerateInputError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_TAPES: list["GradTape"] = []
_PAUSED = 0


class GradTape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes = []       # list of _Node, in execution order
        self._leaves = {}     # id -> Tensor; requires_grad tensors not produced here

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def watch(self, tensor):
        """Register a leaf so it receives a (possibly zero) gradient."""
        if tensor.requires_grad:
            self._leaves[id(tensor)] = tensor

    def backward(self, loss):
        """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

        ``loss`` must be a scalar recorded on this tape. Watched-but-unused
        leaves receive an exact zero gradient.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise DegenerateInputError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = gi if acc is None else acc + gi
        for leaf in self._leaves.values():
            g = grads.get(id(leaf))
            leaf.grad = g if g is not None else np.zeros_like(leaf.data)


class _Node:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class pause_tape:
    """Context manager: run ops without recording (inference / FD probes)."""

    def __enter__(self):
        global _PAUSED
        _PAUSED += 1
        return self

    def __exit__(self, *exc):
        global _PAUSED
        _PAUSED -= 1
        return False


no_grad = pause_tape


def _active_tape():
    if _PAUSED or not _TAPES:
        return None
    return _TAPES[-1]


class Tensor:
    """Dense float64 array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (definitions below) ------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def abs(self):
        return absolute(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(name, out, inputs, vjp):
    tape = _active_tape()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(name, out, inputs, vjp))
        for t in inputs:
            if t.requires_grad and t._tape is None:
                tape.watch(t)
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data)
    return _record("mul", out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data / b.data)
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    a = _wrap(a)
    out = Tensor(-a.data)
    return _record("neg", out, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def transpose(a, axes):
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return _record("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a):
    """Transpose the trailing two axes (any leading batch dims)."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    out = Tensor(a.data.reshape(shape))
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", out, tuple(tensors), vjp)


def take(a, indices, axis=0):
    """Gather rows/entries along ``axis`` by an integer index array."""
    a = _wrap(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(a.data, indices, axis=axis))
    sel = (slice(None),) * axis + (indices,)

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, sel, g)
        return (ga,)

    return _record("take", out, (a,), vjp)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; exact (bitwise) selection."""
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    out = Tensor(np.where(cond, a.data, b.data))

    def vjp(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _record("where", out, (a, b), vjp)


def clamp(a, lo, hi):
    a = _wrap(a)
    out = Tensor(np.clip(a.data, lo, hi))
    passthru = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", out, (a,), lambda g: (g * passthru,))


def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def exp(a):
    a = _wrap(a)
    out = Tensor(np.exp(a.data))
    return _record("exp", out, (a,), lambda g: (g * out.data,))


def log(a):
    a = _wrap(a)
    out = Tensor(np.log(a.data))
    return _record("log", out, (a,), lambda g: (g / a.data,))


def log1p(a):
    a = _wrap(a)
    out = Tensor(np.log1p(a.data))
    return _record("log1p", out, (a,), lambda g: (g / (1.0 + a.data),))


def sqrt(a):
    a = _wrap(a)
    out = Tensor(np.sqrt(a.data))
    return _record("sqrt", out, (a,), lambda g: (g * 0.5 / out.data,))


def tanh(a):
    a = _wrap(a)
    out = Tensor(np.tanh(a.data))
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out.data * out.data),))


def relu(a):
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return _record("relu", out, (a,), lambda g: (g * mask,))


def absolute(a):
    a = _wrap(a)
    out = Tensor(np.abs(a.data))
    sign = np.sign(a.data)
    return _record("abs", out, (a,), lambda g: (g * sign,))


def sigmoid(a):
    a = _wrap(a)
    x = a.data
    # piecewise-stable logistic
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    return _record("sigmoid", out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def maximum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.maximum(a.data, b.data))
    amask = a.data >= b.data  # ties route to the first operand
    return _record("maximum", out, (a, b),
                   lambda g: (_unbroadcast(g * amask, a.shape),
                              _unbroadcast(g * ~amask, b.shape)))


def minimum(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(np.minimum(a.data, b.data))
    amask = a.data <= b.data
    return _record("minimum", out, (a, b),
                   lambda g: (_unbroadcast(g * amask, a.shape),
                              _unbroadcast(g * ~amask, b.shape)))


def detach(a):
    """Value copy with no gradient flow (stop-gradient)."""
    a = _wrap(a)
    return Tensor(a.data)


def softmax(a, axis=-1):
    """Softmax along ``axis``.

    Entries may be -inf (attention masking); a row that is entirely -inf
    falls back to uniform weights with zero gradient, and a warning is
    logged. +inf or NaN entries are rejected.
    """
    a = _wrap(a)
    if not isinstance(axis, (int, np.integer)):
        raise ShapeError(f"softmax axis must be an int, got {axis!r}")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    x = a.data
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NonFiniteError("softmax input contains NaN or +inf")
    m = np.max(x, axis=axis, keepdims=True)
    dead = np.isneginf(m)  # fully-masked slices
    if dead.any():
        logger.warning("softmax: %d fully-masked slice(s), falling back to uniform",
                    int(dead.sum()))
        m = np.where(dead, 0.0, m)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    n = x.shape[axis]
    y = np.where(dead, 1.0 / n, e / np.where(s == 0.0, 1.0, s))
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        dx = y * (g - dot)
        if dead.any():
            dx = np.where(dead, 0.0, dx)
        return (dx,)

    return _record("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# composite numeric ops
# ---------------------------------------------------------------------------

def bce_with_logits(logits, targets):
    """Elementwise binary cross entropy on logits.

    Uses the log-sum-exp form max(z,0) - z*y + log(1+exp(-|z|)), stable for
    |z| up to ~700. Targets may be hard {0,1} or soft [0,1] values.
    """
    logits, targets = _wrap(logits), _wrap(targets)
    if logits.shape != targets.shape:
        raise ShapeError(
            f"bce_with_logits shape mismatch: {logits.shape} vs {targets.shape}")
    return relu(logits) - logits * targets + log1p(exp(-logits.abs()))


def bce_mean(logits, targets):
    return tmean(bce_with_logits(logits, targets))


def cosine_similarity(a, b, axis=-1):
    """Cosine similarity along ``axis``; zero-norm inputs are an error."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(
            f"cosine_similarity dim mismatch: {a.shape} vs {b.shape} on axis {axis}")
    na = np.linalg.norm(a.data, axis=axis)
    nb = np.linalg.norm(b.data, axis=axis)
    if np.any(na < 1e-12) or np.any(nb < 1e-12):
        raise DegenerateInputError("cosine_similarity: zero-norm vector")
    dot = tsum(a * b, axis=axis)
    den = sqrt(tsum(a * a, axis=axis)) * sqrt(tsum(b * b, axis=axis))
    return dot / den


def logsumexp(a, axis=None, keepdims=False):
    """log(sum(exp(a))); shift-stabilized, -inf entries contribute zero."""
    a = _wrap(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # constant shift, any value is exact
    s = log(tsum(exp(a - Tensor(m)), axis=axis, keepdims=True)) + Tensor(m)
    if keepdims:
        return s
    if axis is None:
        return reshape(s, ())
    return reshape(s, s.data.squeeze(axis=axis).shape)


def multi_head_attention(q, k, v, wq, wk, wv, wo, heads, additive_mask=None):
    """Scaled dot-product multi-head attention with optional additive mask.

    q: (Nq, d) or (B, Nq, d); k, v: (Nk, d) or (B, Nk, d). The mask is added
    to the pre-softmax scores and must broadcast to (..., heads, Nq, Nk);
    use -inf to remove a key. Weight tensors are (d, d), no biases.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d = q.shape[-1]
    if d % heads != 0:
        raise ShapeError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError("q/k/v model dims differ")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("k and v lengths differ")
    dh = d // heads

    def split_heads(x):
        n = x.shape[-2]
        if x.ndim == 2:
            return transpose(reshape(x, (n, heads, dh)), (1, 0, 2))
        return transpose(reshape(x, (x.shape[0], n, heads, dh)), (0, 2, 1, 3))

    qh = split_heads(q @ wq)
    kh = split_heads(k @ wk)
    vh = split_heads(v @ wv)
    scores = (qh @ swap_last(kh)) * (1.0 / math.sqrt(dh))
    if additive_mask is not None:
        mask = additive_mask if isinstance(additive_mask, Tensor) else Tensor(additive_mask)
        scores = scores + mask
    weights = softmax(scores, axis=-1)
    out = weights @ vh
    if out.ndim == 3:  # (h, Nq, dh)
        merged = reshape(transpose(out, (1, 0, 2)), (out.shape[1], d))
    else:  # (B, h, Nq, dh)
        merged = reshape(transpose(out, (0, 2, 1, 3)), (out.shape[0], out.shape[2], d))
    return merged @ wo


def assert_finite(t, term):
    """Raise NonFiniteError naming ``term`` if ``t`` holds NaN/Inf."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value in '{term}'", term=term)
    return t


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate
    at a time: (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``f`` takes a Tensor and returns a scalar Tensor or float. Evaluations
    run with the tape paused so probing never pollutes an active recording.
    """
    if h <= 0:
        raise DegenerateInputError(f"finite_diff_grad: h must be positive, got {h}")
    x = _wrap(x)
    grad = np.empty_like(x.data)
    flat = x.data.ravel()
    with pause_tape():
        for i in range(flat.size):
            for sgn in (+1.0, -1.0):
                probe = x.data.copy()
                probe.ravel()[i] += sgn * h
                val = f(Tensor(probe))
                val = val.item() if isinstance(val, Tensor) else float(val)
                if not np.isfinite(val):
                    raise NonFiniteError(
                        f"finite_diff_grad: f returned {val} at coordinate {i}")
                if sgn > 0:
                    fp = val
                else:
                    fm = val
            grad.ravel()[i] = (fp - fm) / (2.0 * h)
    return grad


def backward(loss):
    """Convenience wrapper: run backward on the tape that recorded ``loss``."""
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise DegenerateInputError("loss is not attached to any tape")
    loss._tape.backward(loss)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
