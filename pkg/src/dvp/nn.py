"""Neural building blocks on top of :mod:`dvp.tensor`: layers, MLP, Adam, clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


class Module:
    """Parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; sub-modules are
    ``Module`` attributes. Names follow attribute insertion order, dotted.
    Plain numpy arrays listed in ``_buffers`` (e.g. batch-norm running stats)
    are persisted alongside parameters.
    """

    _buffers: tuple = ()
    training = True

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield prefix + key, getattr(self, key)
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=""):
        out = {name: p.data for name, p in self.named_parameters(prefix)}
        out.update(dict(self.named_buffers(prefix)))
        return out

    def load_state_dict(self, state, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            p.data = np.array(state[name], dtype=p.dtype).reshape(p.shape)
        for name, buf in self.named_buffers(prefix):
            if name not in state:
                raise KeyError(f"missing buffer {name}")
            buf[...] = state[name]

    def astype(self, dtype):
        """Cast parameters and buffers in place (gradient checks run in float64)."""
        for m in self.modules():
            for key, val in vars(m).items():
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                elif key in m._buffers:
                    setattr(m, key, val.astype(dtype))
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng, shape, fan_in, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = Tensor(kaiming_uniform(rng, (n_in, n_out), n_in), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"expected {self.weight.shape[0]} input features, got {x.shape[-1]}")
        return T.linear(x, self.weight, self.bias)


_OUTPUT_ACTS = {
    "identity": lambda y: y,
    "none": lambda y: y,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
}


class MLP(Module):
    """in -> 256 -> 256 -> out with GELU hidden activations."""

    def __init__(self, n_in, n_out, rng, hidden=256, out_act="identity"):
        if out_act not in _OUTPUT_ACTS:
            raise ValueError(f"unknown output activation {out_act!r}")
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.fc3 = Linear(hidden, n_out, rng)
        self.out_act = out_act

    def __call__(self, x):
        h = T.gelu(self.fc1(x))
        h = T.gelu(self.fc2(h))
        return _OUTPUT_ACTS[self.out_act](self.fc3(h))


def mlp_forward(p: MLP, x):
    return p(x)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng):
        fan_in = c_in * k * k
        self.weight = Tensor(kaiming_uniform(rng, (c_out, c_in, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x, layout="NCHW"):
        return T.conv2d(x, self.weight, self.bias, layout=layout)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.weight = Tensor(np.ones(c), requires_grad=True)
        self.bias = Tensor(np.zeros(c), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=self.weight.dtype)
        self.running_var = np.ones(c, dtype=self.weight.dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, layout="NCHW"):
        return T.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps, layout)


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter step counts, so parameters that start training late
    # (frozen prototypes) get correct bias correction
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict | None, s: AdamState, lr_scale: dict | None = None):
    """Apply one Adam update in place to ``params`` (name -> Tensor).

    ``lr_scale`` optionally multiplies the step size of individual parameters.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise T.NonFiniteError(f"non-finite gradient for {name}")
        if name not in s.m:
            s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
            s.t[name] = 0
        elif s.m[name].shape != p.shape:
            raise ValueError(f"moment shape mismatch for {name}")
        s.t[name] += 1
        t = s.t[name]
        m, v = s.m[name], s.v[name]
        m *= s.beta1
        m += (1 - s.beta1) * g
        v *= s.beta2
        v += (1 - s.beta2) * (g * g)
        mhat = m / (1 - s.beta1**t)
        vhat = v / (1 - s.beta2**t)
        lr = s.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + s.eps)).astype(p.dtype)
    s.step += 1


def global_norm(grads):
    return float(np.sqrt(sum(np.sum(np.asarray(g, dtype=np.float64) ** 2) for g in grads)))


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` (arrays, modified in place) to a global L2 norm of at most ``max_norm``.

    Returns the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = list(grads)
    if not grads:
        raise ValueError("no gradients to clip")
    n = global_norm(grads)
    if n > max_norm:
        scale = max_norm / n
        for g in grads:
            g *= scale
    return n


# ---------------------------------------------------------------- verification


def grad_check(f, x, h=1e-3, coords=None, rng=None):
    """Max relative error between reverse-mode and central-difference gradients.

    ``x`` is a tensor or a list of tensors; ``f`` maps nothing (it closes over
    ``x``) or ``x`` to a scalar tensor. With ``coords`` set, only that many
    random coordinates per tensor are probed.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError("h must lie in [1e-5, 1e-2]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(x))

    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = call()
    T.backward(tape, y)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in xs]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with T.no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if coords is not None and coords < flat.size:
                idx = rng.choice(flat.size, size=coords, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(call().data)
                flat[i] = orig - h
                fm = float(call().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise T.NonFiniteError("f is non-finite at a probe point")
                cd = (fp - fm) / (2 * h)
                ai = a.reshape(-1)[i]
                worst = max(worst, abs(ai - cd) / (abs(ai) + abs(cd) + 1e-8))
    for t, s in zip(xs, saved):
        t.requires_grad = s
        t.grad = None
    return worst
