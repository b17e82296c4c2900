"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Everything learnable in the engine (MLPs, attention projections, the SDF
network, canonical point coordinates) lives in `Tensor` objects; forward
computation records primitive ops on a `Tape`, and `Tape.backward` fills in
gradients.  The op set is deliberately small: dense 2-D linear algebra,
elementwise nonlinearities, row softmax, reductions, and indexing.  No
broadcasting beyond what numpy row/column expansion gives, no higher-order
derivatives, no dynamic shapes within a tape.
"""

from __future__ import annotations

import itertools

import numpy as np

DTYPE = np.float64

# Toggled off in benchmark mode; on by default so any NaN/Inf produced by a
# forward or backward pass is a hard error.
CHECK_FINITE = True

_node_ids = itertools.count()
_active_tape = None


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense numeric array participating in reverse-mode differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "node_id")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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


class _Node:
    __slots__ = ("inputs", "output", "bwd")

    def __init__(self, inputs, output, bwd):
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of primitive ops; inputs always precede their uses.

    Usable as a context manager.  One backward pass per forward recording;
    a second backward on the same tape raises.
    """

    def __init__(self):
        self.ops = []
        self.consumed = False

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False

    def backward(self, loss):
        if self.consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        if loss.values.size != 1:
            raise TapeError(f"backward requires a scalar loss, got shape {loss.values.shape}")
        self.consumed = True
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.ops):
            g_out = node.output.grad
            if g_out is None:
                continue
            grads = node.bwd(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if CHECK_FINITE and not np.all(np.isfinite(g)):
                    raise FloatingPointError("non-finite gradient during backward")
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.values)
                inp.grad += g


def backward(tape, loss):
    tape.backward(loss)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def from_op(values, inputs, bwd):
    """Create an output tensor for a primitive op and record it on the tape.

    `bwd(grad_out) -> list of input grads (or None)` closes over whatever
    forward context it needs.  This is also the extension point for compound
    ops with hand-written backwards (e.g. the splat rasterizer).
    """
    values = np.asarray(values, dtype=DTYPE)
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite values in forward pass")
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=rg)
    # no active tape means eager inference: compute values, record nothing
    if rg and _active_tape is not None:
        if _active_tape.consumed:
            raise TapeError("tape already consumed by backward; open a new Tape")
        _active_tape.ops.append(_Node(list(inputs), out, bwd))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, op_name, fwd, bwd_a, bwd_b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.values.shape, b.values.shape)
    except ValueError:
        raise ValueError(
            f"{op_name}: shapes {a.values.shape} and {b.values.shape} are not conformable"
        ) from None

    def bwd(g):
        return (
            _unbroadcast(bwd_a(g, a.values, b.values), a.values.shape),
            _unbroadcast(bwd_b(g, a.values, b.values), b.values.shape),
        )

    return from_op(fwd(a.values, b.values), [a, b], bwd)


def add(a, b):
    return _binary(a, b, "add", lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, "sub", lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, "elementwise-mul", lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(a, b, "div", lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def scalar_mul(a, s):
    return mul(a, float(s))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ValueError(
            f"matmul: shapes {a.values.shape} and {b.values.shape} are not conformable"
        )

    def bwd(g):
        return g @ b.values.T, a.values.T @ g

    return from_op(a.values @ b.values, [a, b], bwd)


def transpose(a):
    a = _as_tensor(a)
    return from_op(a.values.T, [a], lambda g: (g.T,))


def _unary(a, fwd_values, dydx):
    a = _as_tensor(a)
    y = fwd_values(a.values)
    return from_op(y, [a], lambda g, y=y: (g * dydx(a.values, y),))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0.0).astype(DTYPE))


def softplus(a):
    # stable form: max(x, 0) + log1p(exp(-|x|))
    return _unary(
        a,
        lambda x: np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))),
        lambda x, y: _sigmoid(x),
    )


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    y = _sigmoid(a.values)
    return from_op(y, [a], lambda g: (g * y * (1.0 - y),))


def tanh(a):
    a = _as_tensor(a)
    y = np.tanh(a.values)
    return from_op(y, [a], lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = _as_tensor(a)
    y = np.exp(a.values)
    return from_op(y, [a], lambda g: (g * y,))


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a):
    a = _as_tensor(a)
    y = np.sqrt(a.values)
    return from_op(y, [a], lambda g: (g / (2.0 * y),))


def sin(a):
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a):
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def absolute(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def softmax_rows(a):
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ValueError(f"softmax-rows: expected a 2-D input, got shape {a.values.shape}")
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return from_op(s, [a], bwd)


def tsum(a, axis=None):
    a = _as_tensor(a)
    y = a.values.sum(axis=axis, keepdims=axis is not None)

    def bwd(g):
        if axis is None:
            return (np.full_like(a.values, float(g)),)
        return (np.broadcast_to(g, a.values.shape).copy(),)

    return from_op(y, [a], bwd)


def tmean(a, axis=None):
    a = _as_tensor(a)
    n = a.values.size if axis is None else a.values.shape[axis]
    return scalar_mul(tsum(a, axis=axis), 1.0 / n)


def l2_norm(a, eps=1e-12):
    """Euclidean norm over all entries (flattened)."""
    a = _as_tensor(a)
    n = float(np.sqrt(np.sum(a.values * a.values)))

    def bwd(g):
        return (float(g) * a.values / max(n, eps),)

    return from_op(np.array(n), [a], bwd)


def row_norms(a, eps=1e-12):
    """Per-row Euclidean norm of a 2-D tensor, as an N x 1 tensor."""
    a = _as_tensor(a)
    n = np.sqrt(np.sum(a.values * a.values, axis=1, keepdims=True))

    def bwd(g):
        return (g * a.values / np.maximum(n, eps),)

    return from_op(n, [a], bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    y = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return from_op(y, tensors, bwd)


def gather_rows(a, idx):
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(a.values)
        np.add.at(out, idx, g)
        return (out,)

    return from_op(a.values[idx], [a], bwd)


def gather_cols(a, idx):
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros_like(a.values)
        np.add.at(out.T, idx, g.swapaxes(0, 1) if g.ndim > 1 else g)
        return (out,)

    return from_op(a.values[:, idx], [a], bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    old = a.values.shape
    return from_op(a.values.reshape(shape), [a], lambda g: (g.reshape(old),))


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scalar-mul": mul,
    "div": div,
    "softplus": softplus,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sin": sin,
    "cos": cos,
    "abs": absolute,
    "softmax-rows": softmax_rows,
    "sum": tsum,
    "mean": tmean,
    "l2-norm": l2_norm,
    "concat": lambda *ts: concat(list(ts)),
    "reshape": reshape,
    "gather-rows": gather_rows,
    "transpose": transpose,
}


def primitive_forward(op_kind, inputs):
    """Dispatch on op name; raises on unknown kind or non-conformable shapes."""
    if op_kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive op {op_kind!r}")
    return _PRIMITIVES[op_kind](*inputs)


def finite_difference_check(f, x, h=1e-4):
    """Max relative error between the tape gradient of f at x and central differences.

    f maps a Tensor to a scalar Tensor and must be deterministic.  Returns
    max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    xt = Tensor(np.array(x.values if isinstance(x, Tensor) else x, dtype=DTYPE, copy=True),
                requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        tape.backward(y)
    analytic = np.zeros_like(xt.values) if xt.grad is None else xt.grad

    base = np.array(xt.values, copy=True)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        with Tape():  # discard recordings from the numeric evaluations
            flat[i] = orig + h
            fp = float(f(Tensor(base)).values)
            flat[i] = orig - h
            fm = float(f(Tensor(base)).values)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
