"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`.  Outside a
tape, every operation runs forward only, which is how evaluation avoids the
bookkeeping cost.  A typical training step looks like::

    with Tape() as tape:
        loss = model_loss(batch)
    tape.backward(loss)

Broadcasting is limited to scalar-tensor combinations.
"""

from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, GradientError, ShapeError

DTYPE = np.float64
EPS_DIV = 1e-8
SQRT_FLOOR = 1e-12
_TINY = np.finfo(DTYPE).tiny
_BELOW_ONE = np.nextafter(1.0, 0.0)


class Diagnostics:
    """Counts numerical guard activations (epsilon clamps and the like)."""

    def __init__(self):
        self.counts = Counter()

    def record(self, name, n=1):
        if n:
            self.counts[name] += int(n)

    def reset(self):
        self.counts.clear()

    def snapshot(self):
        return dict(sorted(self.counts.items()))


diagnostics = Diagnostics()


class MarginMonitor:
    """Smallest distance to a non-smooth point seen while active.

    Tracks ReLU and signed-sqrt inputs and division denominators, so a
    finite-difference probe can tell whether it straddled a kink.
    """

    def __init__(self):
        self.margin = np.inf

    def watch(self, values):
        if values.size:
            self.margin = min(self.margin, float(np.abs(values).min()))


_monitors = []


@contextmanager
def margin_monitor():
    mon = MarginMonitor()
    _monitors.append(mon)
    try:
        yield mon
    finally:
        _monitors.remove(mon)


def _watch(values):
    for mon in _monitors:
        mon.watch(values)


class Tensor:
    """An n-dimensional real array with an optional gradient.

    ``data`` is a C-contiguous float64 ndarray, so its flat view is the
    row-major layout used by serialization.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

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
        return float(self.data.item())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence]


@dataclass
class Tape:
    """Ordered record of the operations of one forward pass."""

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        self.nodes.append(Node(op, tuple(inputs), output, backward_fn))

    def backward(self, output):
        backward(self, output)


_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def backward(tape, output):
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``output``.

    Gradients are added to any existing ``.grad`` so callers reset them
    between steps.
    """
    if output.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    if not tape.nodes or all(node.output is not output for node in tape.nodes):
        raise GradientError("output was not produced under this tape")
    grads = {id(output): np.ones_like(output.data)}
    keep = {id(output): output}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                gi = np.broadcast_to(gi, t.shape) if gi.size == 1 else gi.reshape(t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=DTYPE, copy=True)
                keep[key] = t
    for key, t in keep.items():
        g = grads[key]
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- elementwise


def _pair(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _reduce_to(g, t):
    # scalar operands broadcast against the other side
    if t.shape == g.shape:
        return g
    return np.array(g.sum(), dtype=DTYPE).reshape(t.shape)


def guard_denominator(d, eps=EPS_DIV):
    """Clamp ``|d|`` to at least ``eps`` keeping its sign (zero counts as positive).

    Returns the guarded array and the boolean mask of clamped entries.
    """
    small = np.abs(d) < eps
    if not small.any():
        return d, small
    sign = np.where(d < 0, -1.0, 1.0)
    return np.where(small, sign * eps, d), small


def add(a, b):
    a, b = _pair("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b):
    a, b = _pair("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b):
    a, b = _pair("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)))


def div(a, b, eps=EPS_DIV):
    """Elementwise ``a / b`` with a sign-preserving clamp on small divisors.

    With ``eps=0`` an exact zero divisor raises :class:`DomainError`.
    Clamped entries are treated as constants in the backward pass.
    """
    a, b = _pair("div", a, b)
    if eps <= 0:
        if np.any(b.data == 0):
            raise DomainError("div: exact zero divisor without epsilon guard")
        d, small = b.data, np.zeros(b.shape, dtype=bool)
    else:
        d, small = guard_denominator(b.data, eps)
        diagnostics.record("div_guard", small.sum())
        _watch(b.data)
    out = a.data / d

    def _bw(g):
        ga = g / d
        gb = np.where(small, 0.0, -g * out / d)
        return _reduce_to(ga, a), _reduce_to(gb, b)

    return _emit("div", (a, b), out, _bw)


def elementwise(kind, a, b):
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


# ---------------------------------------------------------------- activations


def relu(x):
    _watch(x.data)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def sigmoid(x):
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep the open interval (0, 1) even where float64 would round to 0 or 1
    s = np.clip(s, _TINY, _BELOW_ONE)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def activation(kind, x):
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def signed_sqrt(x):
    """``sign(x) * sqrt(|x|)``; the derivative is capped at its value at 1e-12."""
    # exact zeros stay zero unless an upstream kink moves them
    _watch(x.data[x.data != 0])
    r = np.sqrt(np.abs(x.data))
    out = np.sign(x.data) * r

    def _bw(g):
        return (g * 0.5 / np.maximum(r, np.sqrt(SQRT_FLOOR)),)

    return _emit("signed_sqrt", (x,), out, _bw)


# ---------------------------------------------------------------- reductions and shape


def reshape(x, shape):
    shape = tuple(shape)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


def sum_all(x):
    return _emit("sum", (x,), np.array(x.data.sum()),
                 lambda g: (np.full(x.shape, g.item()),))


def mean_all(x):
    n = x.size
    return _emit("mean", (x,), np.array(x.data.mean()),
                 lambda g: (np.full(x.shape, g.item() / n),))


def global_avg_pool(x):
    """Mean over the trailing spatial axes: N×C×H×W → N×C."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape, detail="expected N×C×H×W")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _emit("global_avg_pool", (x,), out,
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),))


def pick(x, index):
    """Select ``x[i, index[i]]`` for each row i of an N×C tensor."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError("pick", x.shape, index.shape)
    rows = np.arange(x.shape[0])

    def _bw(g):
        gx = np.zeros(x.shape)
        gx[rows, index] = g
        return (gx,)

    return _emit("pick", (x,), x.data[rows, index], _bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for x: N×D, weight: K×D, bias: K."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = x.data @ weight.data.T
    inputs = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
        out = out + bias.data
        inputs = (x, weight, bias)

    def _bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _emit("linear", inputs, out, _bw)


def outer_product(z):
    """``z zᵀ`` for a vector, or per row for an N×d batch."""
    if z.ndim == 1:
        out = z.data[:, None] * z.data[None, :]
        return _emit("outer_product", (z,), out, lambda g: ((g + g.T) @ z.data,))
    if z.ndim != 2:
        raise ShapeError("outer_product", z.shape, detail="expected d or N×d")
    out = z.data[:, :, None] * z.data[:, None, :]
    return _emit("outer_product", (z,), out,
                 lambda g: (np.einsum("nij,nj->ni", g + g.transpose(0, 2, 1), z.data),))


def l2_normalize(x, eps=EPS_DIV):
    """Scale the last axis to unit Euclidean norm; norms below ``eps`` are clamped."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    small = norm < eps
    diagnostics.record("l2_guard", small.sum())
    d = np.where(small, eps, norm)
    y = x.data / d

    def _bw(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(small, g / d, (g - y * proj) / d),)

    return _emit("l2_normalize", (x,), y, _bw)


def log_softmax(x):
    """Log-softmax over the last axis, stabilised by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, _bw)


# ---------------------------------------------------------------- convolution


def conv_output_size(size, k, stride, padding, floor_mode=False):
    span = size + 2 * padding - k
    if span < 0 or (span % stride and not floor_mode):
        return None
    return span // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, floor_mode=False):
    """2-D cross-correlation via im2col.

    x: N×C×H×W, weight: O×C×kH×kW, bias: O.  A stride that does not tile
    the padded input exactly raises unless ``floor_mode`` drops the
    trailing rows/columns (the usual strided-conv convention).
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = conv_output_size(h, kh, stride, padding, floor_mode)
    ow = conv_output_size(w, kw, stride, padding, floor_mode)
    if oh is None or ow is None:
        raise ShapeError("conv2d", x.shape, weight.shape,
                         detail=f"stride {stride}, padding {padding} gives non-integral output")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, :stride * (oh - 1) + 1:stride,
                                                         :stride * (ow - 1) + 1:stride]
    # (N, oh, ow, C, kh, kw) so rows are output pixels
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gflat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gflat.sum(axis=0))
        return grads

    return _emit("conv2d", inputs, np.ascontiguousarray(out), _bw)


# ---------------------------------------------------------------- normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch normalization of an N×C×H×W tensor.

    ``running_mean``/``running_var`` are plain ndarrays updated in place
    when ``training`` is true (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def _bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = inv[None, :, None, None] * (
                gxhat - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gg, gb

    return _emit("batch_norm", (x, gamma, beta), out, _bw)
