"""Dense f64 tensors with taped reverse-mode differentiation.

Every differentiable operation in the package is built from the primitives
in this module. Each primitive computes its forward value eagerly with numpy
and records a closure on the active tape that maps output-gradients to
input-gradients. ``backward`` replays the tape in reverse and accumulates
(``+=``) into every tensor that requires gradients.

Conventions:
  - all values are float64,
  - the "row" axis of softmax / pooling / normalization is the last axis
    (or second-to-last for patch pooling), so every primitive works on
    plain matrices as well as on leading batch dimensions,
  - index selections (argmax, top-k, masks) are never differentiated; they
    enter the graph as constant tensors.
"""

from __future__ import annotations

import math
import threading

import numpy as np

GELU_COEF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class ShapeMismatch(ValueError):
    """Raised when operand extents are incompatible; carries both shapes."""

    def __init__(self, op, lhs, rhs):
        self.op = op
        self.lhs = tuple(lhs)
        self.rhs = tuple(rhs)
        super().__init__(f"{op}: incompatible shapes {self.lhs} and {self.rhs}")


class DomainError(ValueError):
    """Raised when a value leaves the mathematical domain of an operation."""


class GradientUsageError(RuntimeError):
    """Raised on misuse of the tape (non-scalar loss, missing grads, ...)."""


class Tensor:
    """A dense f64 array with an optional gradient buffer.

    ``requires_grad`` marks leaves (parameters); intermediate results
    inherit it from their inputs. ``grad`` is allocated lazily by
    ``backward`` and accumulated with ``+=``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientUsageError(
                f"item() requires a scalar tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of executed primitives.

    Each record is ``(out, inputs, rule)`` where ``rule(gout)`` returns one
    gradient array (or None) per input. Replaying the records in reverse
    visits each exactly once; afterwards the tape is cleared ("consumed").
    """

    def __init__(self):
        self.records = []

    def record(self, out: Tensor, inputs, rule):
        self.records.append((out, inputs, rule))

    def __len__(self):
        return len(self.records)


_STATE = threading.local()


def active_tape() -> Tape:
    tape = getattr(_STATE, "tape", None)
    if tape is None:
        tape = Tape()
        _STATE.tape = tape
    return tape


def grad_enabled() -> bool:
    return not getattr(_STATE, "no_grad", False)


class no_grad:
    """Context manager that disables tape recording (forward values only)."""

    def __enter__(self):
        self._prev = getattr(_STATE, "no_grad", False)
        _STATE.no_grad = True
        return self

    def __exit__(self, *exc):
        _STATE.no_grad = self._prev
        return False


class fresh_tape:
    """Context manager that swaps in an empty tape for an isolated graph."""

    def __enter__(self):
        self._prev = getattr(_STATE, "tape", None)
        _STATE.tape = Tape()
        return _STATE.tape

    def __exit__(self, *exc):
        _STATE.tape = self._prev
        return False


def _record(out: Tensor, inputs, rule):
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        active_tape().record(out, inputs, rule)
    return out


def _accumulate(t: Tensor, g):
    if g is None or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor):
    """Propagate d(loss)/d(x) into every reachable requires_grad tensor.

    ``loss`` must be a scalar produced by taped operations. The active
    tape is consumed.
    """
    if loss.data.size != 1:
        raise GradientUsageError(
            f"backward requires a scalar loss, got shape {loss.shape}"
        )
    tape = active_tape()
    if loss.requires_grad:
        _accumulate(loss, np.ones_like(loss.data))
    if loss.grad is None:
        # loss not connected to any parameter; still consume the tape
        tape.records.clear()
        return
    for out, inputs, rule in reversed(tape.records):
        if out.grad is None:
            continue
        grads = rule(out.grad)
        for t, g in zip(inputs, grads):
            _accumulate(t, g)
    tape.records.clear()


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with reverse rules dA = dC.B^T and dB = A^T.dC.

    Supports plain 2-D operands and leading batch dimensions (numpy matmul
    broadcasting). When ``b`` is 2-D the batched case is flattened into a
    single GEMM.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        flat = ad.reshape(-1, ad.shape[-1])
        out_data = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[-1],))
    else:
        out_data = np.matmul(ad, bd)
    out = Tensor(out_data)

    def rule(g):
        if b.ndim == 2 and a.ndim > 2:
            gflat = g.reshape(-1, g.shape[-1])
            ga = (gflat @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ gflat if b.requires_grad else None
            return ga, gb
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), rule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeMismatch("transpose", x.shape, x.shape)
    out = Tensor(x.data.swapaxes(-1, -2))
    return _record(out, (x,), lambda g: (g.swapaxes(-1, -2),))


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.data.shape),))


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Exp-normalize along the last axis with max subtraction.

    Output rows sum to 1 within 1e-12 and every entry lies in (0, 1].
    """
    if x.shape[-1] < 1:
        raise ShapeMismatch("softmax_rows", x.shape, x.shape)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Per-token normalization over the last axis, then affine scale/shift.

    Uses population (biased) variance with ``eps`` added inside the square
    root before the affine map.
    """
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = xc / std
    out = Tensor(xhat * gamma.data + beta.data)

    def rule(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, c).sum(axis=0)
        if x.requires_grad:
            gxhat = g * gamma.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            gx = (gxhat - m1 - xhat * m2) / std
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), rule)


def l2_normalize(x: Tensor, eps: float) -> Tensor:
    """Divide each last-axis vector by max(its L2 norm, eps)."""
    if eps <= 0:
        raise DomainError("l2_normalize eps must be positive")
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    y = x.data / denom
    out = Tensor(y)

    def rule(g):
        big = norms >= eps
        dot = (g * y).sum(axis=-1, keepdims=True)
        gx = np.where(big, (g - y * dot) / denom, g / eps)
        return (gx,)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _unary(x: Tensor, fwd, dfwd) -> Tensor:
    y = fwd(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * dfwd(x.data, y),))


def gelu(x: Tensor) -> Tensor:
    """GELU in the tanh form (the single normative definition here).

    The tanh value is cached for the backward rule; it is by far the most
    expensive pointwise evaluation in the stack.
    """
    v = x.data
    t = np.tanh(GELU_COEF * (v + GELU_CUBIC * v ** 3))
    out = Tensor(0.5 * v * (1.0 + t))

    def rule(g):
        du = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _record(out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary(x, fwd, lambda v, y: y * (1.0 - y))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive values")
    return _unary(x, np.log, lambda v, y: 1.0 / v)


def exp(x: Tensor) -> Tensor:
    return _unary(x, np.exp, lambda v, y: y)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise DomainError("sqrt requires non-negative values")
    return _unary(x, np.sqrt, lambda v, y: 0.5 / np.maximum(y, 1e-300))


def relu(x: Tensor) -> Tensor:
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, y: (v > 0).astype(float))


def neg(x: Tensor) -> Tensor:
    return _unary(x, np.negative, lambda v, y: -np.ones_like(v))


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x > lo."""
    return _unary(x, lambda v: np.maximum(v, lo), lambda v, y: (v > lo).astype(float))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only strictly inside."""
    return _unary(
        x,
        lambda v: np.clip(v, lo, hi),
        lambda v, y: ((v > lo) & (v < hi)).astype(float),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, lambda v: v * c, lambda v, y: np.full_like(v, c))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(x, lambda v: v + c, lambda v, y: np.ones_like(v))


def _binary_same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def badd(x: Tensor, v: Tensor) -> Tensor:
    """Add ``v`` broadcast over the leading axes of ``x``.

    ``v.shape`` must be a suffix of ``x.shape`` (bias over the last axis,
    positional tables over the last two, ...).
    """
    if v.ndim > x.ndim or x.shape[x.ndim - v.ndim:] != v.shape:
        raise ShapeMismatch("badd", x.shape, v.shape)
    out = Tensor(x.data + v.data)

    def rule(g):
        gx = g if x.requires_grad else None
        gv = None
        if v.requires_grad:
            gv = g.reshape((-1,) + v.shape).sum(axis=0) if v.ndim < x.ndim else g
        return gx, gv

    return _record(out, (x, v), rule)


def add_colvec(x: Tensor, v: Tensor) -> Tensor:
    """Add ``v[i]`` to every entry of row ``i`` of a matrix."""
    if x.ndim != 2 or v.shape != (x.shape[0],):
        raise ShapeMismatch("add_colvec", x.shape, v.shape)
    out = Tensor(x.data + v.data[:, None])

    def rule(g):
        gx = g if x.requires_grad else None
        gv = g.sum(axis=1) if v.requires_grad else None
        return gx, gv

    return _record(out, (x, v), rule)


# ---------------------------------------------------------------------------
# Reductions and gathers
# ---------------------------------------------------------------------------

def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def mean_pool_rows(x: Tensor) -> Tensor:
    """Mean over the patch axis: (..., N, C) -> (..., C)."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeMismatch("mean_pool_rows", x.shape, x.shape)
    n = x.shape[-2]
    out = Tensor(x.data.mean(axis=-2))

    def rule(g):
        return (np.repeat(np.expand_dims(g, -2), n, axis=-2) / n,)

    return _record(out, (x,), rule)


def sum_last(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    out = Tensor(x.data.sum(axis=-1))

    def rule(g):
        return (np.repeat(np.expand_dims(g, -1), x.shape[-1], axis=-1),)

    return _record(out, (x,), rule)


def mean_full(x: Tensor) -> Tensor:
    return scale(reduce_sum(x), 1.0 / x.data.size)


def take_pairs(x: Tensor, rows, cols) -> Tensor:
    """Gather x[rows[i], cols[i]] into a vector; selection is constant."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if x.ndim != 2 or rows.shape != cols.shape:
        raise ShapeMismatch("take_pairs", x.shape, rows.shape)
    out = Tensor(x.data[rows, cols])

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _record(out, (x,), rule)


def concat0(parts) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    sizes = [p.shape[0] for p in parts]

    def rule(g):
        grads, start = [], 0
        for p, n in zip(parts, sizes):
            grads.append(g[start:start + n] if p.requires_grad else None)
            start += n
        return tuple(grads)

    return _record(out, tuple(parts), rule)


def concat_last(parts) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    sizes = [p.shape[-1] for p in parts]

    def rule(g):
        grads, start = [], 0
        for p, n in zip(parts, sizes):
            grads.append(g[..., start:start + n] if p.requires_grad else None)
            start += n
        return tuple(grads)

    return _record(out, tuple(parts), rule)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(x.data[..., start:stop])

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _record(out, (x,), rule)


def repeat_interleave0(x: Tensor, r: int) -> Tensor:
    """[a, b] -> [a, a, ..., b, b, ...] along axis 0 (r copies each)."""
    out = Tensor(np.repeat(x.data, r, axis=0))
    n = x.shape[0]

    def rule(g):
        return (g.reshape((n, r) + x.shape[1:]).sum(axis=1),)

    return _record(out, (x,), rule)


def tile0(x: Tensor, r: int) -> Tensor:
    """[a, b] -> [a, b, a, b, ...] along axis 0 (r copies of the block)."""
    reps = (r,) + (1,) * (x.ndim - 1)
    out = Tensor(np.tile(x.data, reps))
    n = x.shape[0]

    def rule(g):
        return (g.reshape((r, n) + x.shape[1:]).sum(axis=0),)

    return _record(out, (x,), rule)


# ---------------------------------------------------------------------------
# Spec-surface dispatchers
# ---------------------------------------------------------------------------

_UNARY_KINDS = {
    "gelu": gelu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "neg": neg,
    "relu": relu,
    "sqrt": sqrt,
}


def elementwise(kind: str, *operands):
    """Pointwise operations; broadcasting is scalar-with-tensor only."""
    if kind in _UNARY_KINDS:
        (x,) = operands
        return _UNARY_KINDS[kind](x)
    if kind == "scale":
        x, c = operands
        return scale(x, c)
    if kind in ("add", "mul"):
        a, b = operands
        if isinstance(b, (int, float)):
            return add_scalar(a, b) if kind == "add" else scale(a, b)
        if isinstance(a, (int, float)):
            return add_scalar(b, a) if kind == "add" else scale(b, a)
        return add(a, b) if kind == "add" else mul(a, b)
    raise ValueError(f"unknown elementwise kind: {kind!r}")


def reduce(kind: str, x: Tensor) -> Tensor:
    if kind == "mean_pool_rows":
        return mean_pool_rows(x)
    if kind == "sum":
        return reduce_sum(x)
    raise ValueError(f"unknown reduce kind: {kind!r}")


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Compare analytic gradients of scalar f(x) against central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
    ``f`` must be deterministic; the numeric passes run untaped.
    """
    if not (1e-7 <= h <= 1e-3):
        raise GradientUsageError(f"grad_check step h={h} outside [1e-7, 1e-3]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with fresh_tape():
        out = f(probe)
        backward(out)
    if probe.grad is None:
        analytic = np.zeros_like(probe.data)
    else:
        analytic = probe.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            base = flat.copy()
            base[i] = orig + h
            up = f(Tensor(base.reshape(x.data.shape))).item()
            base[i] = orig - h
            down = f(Tensor(base.reshape(x.data.shape))).item()
            nflat[i] = (up - down) / (2.0 * h)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
