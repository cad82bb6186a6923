"""Learnable and fixed DSL functions.

All functions operate on batches: latents ``[B, D]``, doubles ``[B, 1]``,
direction pairs ``[B, 2]``, appearances ``[B, 3]`` and shapes ``[B, 4, N]``.
"""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..efd import DEFAULT_ORDER
from ..nn import MLP, Module

SCALING_FLOOR = 0.1
ROTATION_EPS = 1e-6
SHAPE_GAIN = 10.0
# shrink the shape head's last layer at init: with the gain, a full-size
# Kaiming init starts from jagged contours whose harmonics 2..4 dwarf a_1
SHAPE_INIT_SCALE = 0.1


def object_appearance(mlp: MLP, z):
    return mlp(z)


background_appearance = object_appearance


def scaling(mlp: MLP, z):
    """Strictly positive magnification: softplus(raw) + 0.1."""
    return T.add(T.softplus(mlp(z)), SCALING_FLOOR)


def normalize_direction(u):
    norm = T.sqrt(T.tsum(T.square(u), axis=1, keepdims=True))
    return T.div(u, T.add(norm, ROTATION_EPS))


def rotation(mlp: MLP, z):
    """Unit direction (cos phi, sin phi)."""
    return normalize_direction(mlp(z))


def describe_shape(mlp: MLP, z, order=DEFAULT_ORDER, gain=SHAPE_GAIN):
    raw = mlp(z)
    return T.reshape(T.mul(raw, gain), (raw.shape[0], 4, order))


class PrototypeBank(Module):
    """Learnable array of prototype shapes plus the gating MLP that weighs them."""

    def __init__(self, rng, latent_dim=256, n_prototypes=8, order=DEFAULT_ORDER, bank=None, jitter=0.1):
        if n_prototypes < 2:
            raise ValueError("need at least 2 prototypes")
        if bank is None:
            from ..training import init_prototypes

            bank = init_prototypes(rng, n_prototypes, order, jitter=jitter)
        self.bank = T.Tensor(np.asarray(bank).reshape(n_prototypes, 4, order), requires_grad=True)
        self.gate = MLP(latent_dim, n_prototypes, rng)

    @property
    def n_prototypes(self):
        return self.bank.shape[0]


def prototype(pb: PrototypeBank, z, tau=1.0, hard=False):
    """Differentiable lookup into the prototype bank.

    Returns ``(shape [B, 4, N], weights [B, P], logits [B, P])``. With ``hard``
    the forward pass uses the one-hot argmax while gradients follow the soft
    weights (straight-through).
    """
    logits = pb.gate(z)
    w = T.softmax(T.mul(logits, 1.0 / tau), axis=1)
    if hard:
        onehot = np.eye(pb.n_prototypes, dtype=w.dtype)[np.argmax(logits.data, axis=1)]
        w = T.add(w, onehot - w.data)
    return T.weighted_sum(w, pb.bank), w, logits


def scale_shape(s, k):
    """Multiply all coefficients by ``k`` (scalar or ``[B, 1]``)."""
    s = T.as_tensor(s)
    k = T.as_tensor(k)
    if k.ndim > 0:
        k = T.reshape(k, (-1, 1, 1))
    return T.mul(s, k)


def rotation_matrix(cs):
    """``[B, 2]`` (c, s) -> ``[B, 2, 2]`` [[c, -s], [s, c]]."""
    cs = T.as_tensor(cs)
    c, s = cs[:, 0], cs[:, 1]
    row0 = T.stack([c, T.neg(s)], axis=1)
    row1 = T.stack([s, c], axis=1)
    return T.stack([row0, row1], axis=1)


def rotate_shape(s, cs):
    """Rotate the shape by applying R to the (A, C) and (B, D) coefficient pairs."""
    s = T.as_tensor(s)
    cs = T.as_tensor(cs)
    if cs.ndim == 1:
        cs = T.reshape(cs, (1, 2))
    B, _, N = s.shape
    R = rotation_matrix(cs)
    out = T.matmul(R, T.reshape(s, (B, 2, 2 * N)))
    return T.reshape(out, (B, 4, N))


class FunctionLibrary(Module):
    """Parameter sets for the learnable functions a program uses."""

    def __init__(self, rng, names, latent_dim=256, order=DEFAULT_ORDER, n_prototypes=8, proto_jitter=0.1):
        self.latent_dim = latent_dim
        self.order = order
        for name in dict.fromkeys(names):
            if name in ("ObjectAppearance", "BackgroundAppearance"):
                setattr(self, name, MLP(latent_dim, 3, rng, out_act="sigmoid"))
            elif name == "Scaling":
                setattr(self, name, MLP(latent_dim, 1, rng))
            elif name == "Rotation":
                setattr(self, name, MLP(latent_dim, 2, rng))
            elif name == "DescribeShape":
                mlp = MLP(latent_dim, 4 * order, rng)
                mlp.fc3.weight.data *= SHAPE_INIT_SCALE
                setattr(self, name, mlp)
            elif name == "Prototype":
                setattr(self, name, PrototypeBank(rng, latent_dim, n_prototypes, order,
                                                      jitter=proto_jitter))
            else:
                raise ValueError(f"{name} is not a learnable function")

    def has(self, name):
        return isinstance(getattr(self, name, None), Module)
