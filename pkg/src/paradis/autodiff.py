"""Dense-tensor engine with reverse-mode automatic differentiation.

Design contract:

* a ``Tensor`` wraps a contiguous numpy array (float64 by default) plus an
  optional gradient buffer of the same shape;
* every differentiable operation appends one record to the active ``Tape``;
  recording order equals forward execution order and ``backward`` sweeps the
  tape strictly in reverse, so no topological sort is needed;
* gradients accumulate (``+=``) into leaf tensors only; call ``zero_grad``
  between optimizer steps;
* broadcasting is restricted to scalars and one leading batch axis, any other
  shape mismatch raises ``ShapeError``;
* all forward outputs are checked for NaN/Inf and raise ``NonFiniteError``.

Reductions rely on numpy's fixed summation order, so repeated runs on the
same machine give bitwise-identical results.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


_next_id = 0


def _new_id():
    global _next_id
    _next_id += 1
    return _next_id


class Tensor:
    """N-dimensional float array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray promotes 0-d to 1-d, so guard scalars
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tid = _new_id()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are wrapped as constant 0-d tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, dtype=np.float64):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class TapeOp:
    """One recorded operation: parents, output and its backward rule."""

    __slots__ = ("kind", "parents", "out", "backward")

    def __init__(self, kind, parents, out, backward):
        self.kind = kind
        self.parents = parents
        self.out = out
        self.backward = backward


class Tape:
    """Ordered log of operations; also usable as a context manager."""

    def __init__(self):
        self.ops = []

    def __len__(self):
        return len(self.ops)

    def clear(self):
        self.ops.clear()

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_tape_stack = [Tape()]
_grad_enabled = True


def active_tape():
    return _tape_stack[-1]


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(kind, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")


def make_op(kind, parents, out_data, backward):
    """Create the output tensor of an op and record it when grads are needed.

    ``backward(g)`` must return one gradient array (or None) per parent,
    already reduced to the parent's shape.
    """
    _check_finite(kind, out_data)
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        active_tape().ops.append(TapeOp(kind, tuple(parents), out, backward))
    return out


def backward(loss):
    """Reverse sweep of the active tape; accumulates into leaf ``grad``s."""
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise ShapeError("backward expects a scalar (shape ()) tensor loss")
    tape = active_tape()
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad (tape empty for it)")
    if not tape.ops:
        raise RuntimeError("tape is empty")
    flows = {loss.tid: np.ones((), dtype=loss.dtype)}
    produced = {op.out.tid for op in tape.ops}
    for op in reversed(tape.ops):
        g = flows.get(op.out.tid)
        if g is None:
            continue
        for parent, gp in zip(op.parents, op.backward(g)):
            if gp is None or not parent.requires_grad:
                continue
            acc = flows.get(parent.tid)
            if acc is None:
                flows[parent.tid] = np.array(gp, dtype=parent.dtype, copy=True)
            else:
                acc += gp
        del flows[op.out.tid]
    # leaves: tensors that were never produced by a recorded op
    for op in tape.ops:
        for parent in op.parents:
            if parent.requires_grad and parent.tid not in produced:
                g = flows.get(parent.tid)
                if g is not None:
                    parent.accumulate_grad(g)
                    del flows[parent.tid]


def zero_grad(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# broadcasting rules: exact match, scalar, or one leading batch axis


def _conform(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == len(sb) + 1 and sa[1:] == sb:
        return
    if len(sb) == len(sa) + 1 and sb[1:] == sa:
        return
    raise ShapeError(f"shapes {sa} and {sb} do not conform")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    if g.ndim == len(shape) + 1 and g.shape[1:] == shape:
        return g.sum(axis=0)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    _conform(a, b)
    return make_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    _conform(a, b)
    return make_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    _conform(a, b)
    return make_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    _conform(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return make_op(
        "div", (a, b), out,
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    return make_op("neg", (a,), -a.data, lambda g: (-g,))


def scalar_mul(a, c):
    c = float(c)
    return make_op("scalar-mul", (a,), a.data * c, lambda g: (g * c,))


def square(a):
    return make_op("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a):
    out = np.sqrt(a.data)
    return make_op("sqrt", (a,), out, lambda g: (g * 0.5 / np.sqrt(a.data),))


def absolute(a):
    return make_op("abs", (a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def exp(a):
    out = np.exp(a.data)
    return make_op("exp", (a,), out, lambda g: (g * out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_op("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def silu(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(
        "silu", (a,), a.data * s,
        lambda g: (g * s * (1.0 + a.data * (1.0 - s)),),
    )


def sin(a):
    return make_op("sin", (a,), np.sin(a.data), lambda g: (g * np.cos(a.data),))


def cos(a):
    return make_op("cos", (a,), np.cos(a.data), lambda g: (-g * np.sin(a.data),))


def arcsin(a):
    # the derivative is clipped near |x|=1 to keep pole-adjacent points finite
    out = np.arcsin(a.data)
    def back(g):
        d = np.maximum(1.0 - a.data * a.data, 1e-24)
        return (g / np.sqrt(d),)
    return make_op("arcsin", (a,), out, back)


def atan2(y, x):
    _conform(y, x)
    out = np.arctan2(y.data, x.data)
    def back(g):
        denom = x.data * x.data + y.data * y.data
        safe = np.where(denom == 0.0, 1.0, denom)
        gy = np.where(denom == 0.0, 0.0, g * x.data / safe)
        gx = np.where(denom == 0.0, 0.0, -g * y.data / safe)
        return (_unbroadcast(gy, y.shape), _unbroadcast(gx, x.shape))
    return make_op("atan2", (y, x), out, back)


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (numpy rules); gradient sums back."""
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc

    def back(g):
        extra = g.ndim - a.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i in range(a.ndim) if a.shape[i] == 1 and g.shape[i] > 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return make_op("broadcast", (a,), np.array(out), back)


def clip(a, lo, hi):
    out = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(a.dtype)
    return make_op("clip", (a,), out, lambda g: (g * inside,))


def mod_2pi(a):
    """Wrap angles into [0, 2*pi); gradient passes through unchanged."""
    out = np.mod(a.data, 2.0 * math.pi)
    return make_op("mod-2pi", (a,), out, lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.dtype),)
    return make_op("sum", (a,), out, back)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else a.shape[axis]
    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).astype(a.dtype),)
    return make_op("mean", (a,), out, back)


def weighted_mean(a, weights):
    """Mean of ``a * weights`` with a fixed (non-learned) weight array."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        w = np.broadcast_to(w, a.shape)
    out = (a.data * w).mean()
    n = a.data.size
    return make_op("weighted-mean", (a,), np.asarray(out), lambda g: (g * w / n,))


# ---------------------------------------------------------------------------
# linear algebra and layout ops


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    return make_op(
        "matmul", (a, b), a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def concat(tensors, axis=0):
    parents = tuple(tensors)
    if len({t.ndim for t in parents}) != 1:
        raise ShapeError("concat operands must share rank")
    out = np.concatenate([t.data for t in parents], axis=axis)
    sizes = [t.shape[axis] for t in parents]
    offsets = np.cumsum([0] + sizes)
    def back(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parents))
        )
    return make_op("concat", parents, out, back)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return make_op("reshape", (a,), out.copy(),
                   lambda g: (g.reshape(a.shape),))


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    def back(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)
    return make_op("slice", (a,), a.data[idx].copy(), back)


def conv1x1(x, w, b=None):
    """Pointwise (1x1) convolution over the channel axis of ``x[C,H,W]``."""
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1 shapes x={x.shape} w={w.shape}")
    c_out = w.shape[0]
    out = (w.data @ x.data.reshape(x.shape[0], -1)).reshape(c_out, *x.shape[1:])
    if b is None:
        def back(g):
            gm = g.reshape(c_out, -1)
            return (
                (w.data.T @ gm).reshape(x.shape),
                gm @ x.data.reshape(x.shape[0], -1).T,
            )
        return make_op("pointwise-conv", (x, w), out, back)
    if b.shape != (c_out,):
        raise ShapeError(f"conv1x1 bias shape {b.shape}")
    out = out + b.data[:, None, None]
    def back(g):
        gm = g.reshape(c_out, -1)
        return (
            (w.data.T @ gm).reshape(x.shape),
            gm @ x.data.reshape(x.shape[0], -1).T,
            g.sum(axis=(1, 2)),
        )
    return make_op("pointwise-conv", (x, w, b), out, back)


def depthwise_conv3x3(xp, k):
    """Per-channel 3x3 stencil; ``xp[C,H+2,W+2]`` must carry its 1-cell halo."""
    if xp.ndim != 3 or k.shape != (xp.shape[0], 3, 3):
        raise ShapeError(f"depthwise3x3 shapes x={xp.shape} k={k.shape}")
    c, hp, wp = xp.shape
    h, w = hp - 2, wp - 2
    if h < 1 or w < 1:
        raise ShapeError("depthwise3x3 input smaller than its halo")
    out = np.zeros((c, h, w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            out += k.data[:, i, j, None, None] * xp.data[:, i:i + h, j:j + w]
    def back(g):
        gx = np.zeros_like(xp.data)
        gk = np.zeros_like(k.data)
        for i in range(3):
            for j in range(3):
                gx[:, i:i + h, j:j + w] += k.data[:, i, j, None, None] * g
                gk[:, i, j] = (xp.data[:, i:i + h, j:j + w] * g).sum(axis=(1, 2))
        return (gx, gk)
    return make_op("depthwise-conv-3x3", (xp, k), out, back)


def conv3x3(xp, w, b=None):
    """Full 3x3 convolution on a pre-padded input ``xp[Ci,H+2,W+2]``."""
    if xp.ndim != 3 or w.ndim != 4 or w.shape[1:] != (xp.shape[0], 3, 3):
        raise ShapeError(f"conv3x3 shapes x={xp.shape} w={w.shape}")
    c_out, c_in = w.shape[0], w.shape[1]
    h, wd = xp.shape[1] - 2, xp.shape[2] - 2
    out = np.zeros((c_out, h, wd), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            patch = xp.data[:, i:i + h, j:j + wd].reshape(c_in, -1)
            out += (w.data[:, :, i, j] @ patch).reshape(c_out, h, wd)
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv3x3 bias shape {b.shape}")
        out = out + b.data[:, None, None]
    parents = (xp, w) if b is None else (xp, w, b)
    def back(g):
        gm = g.reshape(c_out, -1)
        gx = np.zeros_like(xp.data)
        gw = np.zeros_like(w.data)
        for i in range(3):
            for j in range(3):
                patch = xp.data[:, i:i + h, j:j + wd].reshape(c_in, -1)
                gw[:, :, i, j] = gm @ patch.T
                gx[:, i:i + h, j:j + wd] += (
                    w.data[:, :, i, j].T @ gm
                ).reshape(c_in, h, wd)
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(1, 2)))
    return make_op("conv3x3", parents, out, back)


def avg_pool2(x):
    """2x2 average pooling of ``x[C,H,W]``; H and W must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even dims, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)
    return make_op("avg-pool2", (x,), out, back)


def upsample2(x):
    """Nearest-neighbor 2x upsampling of ``x[C,H,W]``."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    c, h, w = x.shape
    def back(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)
    return make_op("upsample2", (x,), out, back)


def pad_edge(x, top=0, bottom=0, left=0, right=0):
    """Replicate-pad the two spatial axes of ``x[C,H,W]``."""
    out = np.pad(x.data, ((0, 0), (top, bottom), (left, right)), mode="edge")
    c, h, w = x.shape
    def back(g):
        ga = g[:, top:top + h, left:left + w].copy()
        if top:
            ga[:, 0, :] += g[:, :top, left:left + w].sum(axis=1)
        if bottom:
            ga[:, -1, :] += g[:, top + h:, left:left + w].sum(axis=1)
        if left:
            ga[:, :, 0] += g[:, top:top + h, :left].sum(axis=2)
        if right:
            ga[:, :, -1] += g[:, top:top + h, left + w:].sum(axis=2)
        # corners fold onto the corner cells
        if top and left:
            ga[:, 0, 0] += g[:, :top, :left].sum(axis=(1, 2))
        if top and right:
            ga[:, 0, -1] += g[:, :top, left + w:].sum(axis=(1, 2))
        if bottom and left:
            ga[:, -1, 0] += g[:, top + h:, :left].sum(axis=(1, 2))
        if bottom and right:
            ga[:, -1, -1] += g[:, top + h:, left + w:].sum(axis=(1, 2))
        return (ga,)
    return make_op("pad-edge", (x,), out, back)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    def __init__(self, max_rel_err, tol):
        self.max_rel_err = float(max_rel_err)
        self.tol = float(tol)
        self.passed = self.max_rel_err <= self.tol

    def __repr__(self):
        status = "ok" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e})"


def grad_check(f, x, eps=1e-6, tol=1e-5):
    """Compare the reverse-mode gradient of scalar ``f(x)`` with central
    finite differences. Returns a report; never raises on mismatch."""
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    x = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64),
               requires_grad=True)
    with Tape():
        y = f(x)
        backward(y)
    ad = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    fd = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            fd_flat[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-3)
    max_rel = np.max(np.abs(ad - fd) / denom) if ad.size else 0.0
    return GradCheckReport(max_rel, tol)
