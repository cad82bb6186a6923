"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Ops executed while a :class:`Tape` is active (and at least one input requires
gradients) are appended to the tape together with a vector-Jacobian product
closure. :func:`backward` replays the tape in exact reverse order.
"""

from __future__ import annotations

import contextlib
import threading

import numba
import numpy as np

_state = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Tape:
    """Ordered record of executed primitive ops."""

    def __init__(self):
        self.nodes = []
        self._outputs = {}

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        self._prev = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev

    def record(self, op, out, inputs, vjp):
        self._outputs[id(out)] = len(self.nodes)
        self.nodes.append((op, out, inputs, vjp))

    def produced(self, t: Tensor) -> bool:
        idx = self._outputs.get(id(t))
        return idx is not None and self.nodes[idx][1] is t


@contextlib.contextmanager
def no_grad():
    prev = active_tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _finalize(op, data, inputs, vjp):
    """Wrap ``data`` as an op output and record it on the active tape."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    needs = any(t.requires_grad for t in inputs)
    # numpy scalars can silently promote float32 work to float64
    dtype = np.result_type(*(t.dtype for t in inputs)) if inputs else data.dtype
    out = Tensor(data, requires_grad=needs, dtype=dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Tensor):
    """Populate ``.grad`` of every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate tensors get their
    gradient for this pass only.
    """
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for op, out, inputs, vjp in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        in_grads = vjp(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.dtype != t.data.dtype:
                # keep the backward pass in the forward precision
                gi = gi.astype(t.data.dtype)
            if tape.produced(t):
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finalize(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finalize(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _finalize(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _finalize("div", out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _finalize("neg", -a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _finalize("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a, eps=0.0):
    """``sqrt(a + eps)``; a positive ``eps`` keeps the derivative finite at zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data + eps)
    return _finalize("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)
    return _finalize("clip", out, (a,), lambda g: (g * mask,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


@numba.njit(cache=True, fastmath=True)
def _gelu_inner(x, inner, c, a):
    for i in range(x.size):
        v = x[i]
        inner[i] = c * (v + a * v * v * v)


@numba.njit(cache=True, fastmath=True)
def _gelu_outer(x, th, out, deriv, c, a3, half, one):
    for i in range(x.size):
        v = x[i]
        t = th[i]
        out[i] = half * v * (one + t)
        deriv[i] = half * (one + t) + half * v * (one - t * t) * c * (one + a3 * v * v)


def gelu(a):
    """GELU, tanh approximation. The derivative is kept from the forward pass."""
    a = as_tensor(a)
    x = np.ascontiguousarray(a.data).reshape(-1)
    f = x.dtype.type  # constants in the input precision keep the loops vectorised
    th = np.empty_like(x)
    _gelu_inner(x, th, f(_GELU_C), f(0.044715))
    np.tanh(th, out=th)  # numpy's SIMD tanh is much faster than numba's scalar one
    out = np.empty_like(x)
    deriv = np.empty_like(x)
    _gelu_outer(x, th, out, deriv, f(_GELU_C), f(3 * 0.044715), f(0.5), f(1.0))
    return _finalize("gelu", out.reshape(a.shape), (a,), lambda g: (g * deriv.reshape(a.shape),))


def _sigmoid_np(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _finalize("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _finalize("softplus", out, (a,), lambda g: (g * _sigmoid_np(x),))


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finalize("softmax", out, (a,), vjp)


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _finalize("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape),)

    return _finalize("mean", out, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _finalize("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _finalize("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _finalize("getitem", np.array(a.data[idx]), (a,), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _finalize("stack", out, tuple(tensors), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _finalize("concat", out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a, index, axis):
    """``np.take_along_axis`` with a constant integer index."""
    a = as_tensor(a)
    index = np.asarray(index)
    out = np.take_along_axis(a.data, index, axis=axis)

    def vjp(g):
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis % a.ndim] = index
        flat = np.ravel_multi_index(tuple(np.broadcast_arrays(*idx)), a.shape)
        full = np.bincount(flat.ravel(), weights=g.ravel(), minlength=a.size)
        return (full.reshape(a.shape).astype(a.dtype),)

    return _finalize("gather", out, (a,), vjp)


def weighted_sum(weights, rows):
    """Convex-combination lookup: ``weights[B,P] @ rows[P,...]``."""
    weights, rows = as_tensor(weights), as_tensor(rows)
    flat = rows.data.reshape(rows.shape[0], -1)
    out = (weights.data @ flat).reshape((weights.shape[0],) + rows.shape[1:])

    def vjp(g):
        gf = g.reshape(g.shape[0], -1)
        return gf @ flat.T, (weights.data.T @ gf).reshape(rows.shape)

    return _finalize("weighted_sum", out, (weights, rows), vjp)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Batched matmul with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        g = np.ascontiguousarray(g)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _finalize("matmul", out, (a, b), vjp)


def linear(x, w, b=None):
    """``x @ w + b`` for x[B,in], w[in,out], b[out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- convolution / pooling


def _im2col(x, k, pad):
    """NHWC input -> columns ``[B*Ho*Wo, k*k*C]`` ordered (ki, kj, c)."""
    B, H, W, C = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    Ho, Wo = x.shape[1] - k + 1, x.shape[2] - k + 1
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = x[:, i:i + Ho, j:j + Wo, :]
    return cols.reshape(B * Ho * Wo, k * k * C), Ho, Wo


def _col2im(dcols, x_shape, k, pad, Ho, Wo):
    B, H, W, C = x_shape
    d = dcols.reshape(B, Ho, Wo, k, k, C)
    dx = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + Ho, j:j + Wo, :] += d[:, :, :, i, j, :]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad, :]
    return dx


def _to_nhwc(x, layout):
    if layout == "NCHW":
        return transpose(x, (0, 2, 3, 1))
    if layout != "NHWC":
        raise ValueError(f"unknown layout {layout!r}")
    return x


def _from_nhwc(y, layout):
    return transpose(y, (0, 3, 1, 2)) if layout == "NCHW" else y


def conv2d(x, w, b=None, pad=None, layout="NCHW"):
    """Stride-1 convolution with w[O,C,k,k], b[O]; 'same' padding by default.

    ``layout`` selects NCHW or NHWC for x and the output; NHWC avoids two
    transposes per call and is what the perception stack uses internally.
    """
    x, w = as_tensor(x), as_tensor(w)
    O, C, k, _ = w.shape
    cax = 1 if layout == "NCHW" else 3
    if x.ndim != 4 or x.shape[cax] != C:
        raise ValueError(f"conv2d expects input with {C} channels, got {x.shape}")
    if layout == "NCHW":
        return _from_nhwc(conv2d(_to_nhwc(x, layout), w, b, pad, "NHWC"), layout)
    pad = k // 2 if pad is None else pad
    B = x.shape[0]
    cols, Ho, Wo = _im2col(x.data, k, pad)
    # weight rows ordered (ki, kj, c) to match the columns
    wm = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0)).reshape(k * k * C, O)
    y = cols @ wm
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        y += b.data
        inputs = (x, w, b)
    out = y.reshape(B, Ho, Wo, O)

    def vjp(g):
        gm = np.ascontiguousarray(g).reshape(B * Ho * Wo, O)
        gx = _col2im(gm @ wm.T, x.shape, k, pad, Ho, Wo) if x.requires_grad else None
        gw = (cols.T @ gm).reshape(k, k, C, O).transpose(3, 2, 0, 1)
        grads = [gx, gw]
        if b is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return _finalize("conv2d", out, inputs, vjp)


def avg_pool2d(x, layout="NCHW"):
    """2x2 average pooling with stride 2."""
    x = as_tensor(x)
    if layout == "NCHW":
        return _from_nhwc(avg_pool2d(_to_nhwc(x, layout), "NHWC"), layout)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avg_pool2d needs even spatial dims, got {(H, W)}")
    v = x.data.reshape(B, H // 2, 2, W // 2, 2, C)
    out = (v[:, :, 0, :, 0] + v[:, :, 0, :, 1] + v[:, :, 1, :, 0] + v[:, :, 1, :, 1]) * 0.25

    def vjp(g):
        gx = np.empty((B, H // 2, 2, W // 2, 2, C), dtype=g.dtype)
        gx[...] = (g * 0.25)[:, :, None, :, None, :]
        return (gx.reshape(B, H, W, C),)

    return _finalize("avg_pool2d", out, (x,), vjp)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5, layout="NCHW"):
    """Per-channel batch norm over (N, H, W).

    In training mode the running buffers (plain numpy arrays) are updated in place.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if layout == "NCHW":
        y = batch_norm(_to_nhwc(x, layout), gamma, beta, running_mean, running_var, training,
                       momentum, eps, "NHWC")
        return _from_nhwc(y, layout)
    C = x.shape[-1]
    x2 = x.data.reshape(-1, C)
    n = x2.shape[0]
    if training:
        mu = x2.mean(axis=0)
        var = x2.var(axis=0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x2 - mu.astype(x.dtype)) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def vjp(g):
        g2 = g.reshape(-1, C)
        gg = (g2 * xhat).sum(axis=0)
        gb = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if training:
            gx = (inv / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            gx = dxhat * inv
        return gx.reshape(x.shape), gg, gb

    return _finalize("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------- losses


def mse_loss(pred, target):
    """Mean over all elements of the squared difference, accumulated in float64."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)
    n = diff.size

    def vjp(g):
        gd = (2.0 / n) * float(g) * diff
        return gd.astype(pred.dtype), (-gd).astype(target.dtype)

    return _finalize("mse", out, (pred, target), vjp)
