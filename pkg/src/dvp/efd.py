"""Elliptic Fourier descriptors of closed 2D contours.

Coefficients are stored per harmonic ``n = 1..N`` as four arrays A, B, C, D so
that ``x(t) = sum A_n cos(2 pi n t / T) + B_n sin(2 pi n t / T)`` and likewise
``y(t)`` with C, D. Batched tensors use the layout ``[batch, 4, N]`` with rows
(A, B, C, D); reshaping that to ``[batch, 2, 2N]`` gives one row per output
coordinate, which is what makes rotations a 2x2 matmul.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_ORDER = 8
AMPLITUDE_EPS = 1e-12


@dataclass
class Contour:
    """Closed polyline; the closing segment back to ``points[0]`` is implicit."""

    points: np.ndarray  # [K, 2]
    closed: bool = True

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"contour points must be [K, 2], got {self.points.shape}")
        if len(self.points) < 3:
            raise ValueError("contour needs at least 3 points")

    def __len__(self):
        return len(self.points)


@dataclass
class EfdCoeffs:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def order(self):
        return len(self.A)

    def as_array(self):
        """Stacked ``[4, N]`` array (rows A, B, C, D)."""
        return np.stack([self.A, self.B, self.C, self.D])

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64).reshape(4, -1)
        return cls(*(arr[i].copy() for i in range(4)))

    @classmethod
    def zeros(cls, order=DEFAULT_ORDER):
        return cls.from_array(np.zeros((4, order)))

    def truncate(self, order):
        return EfdCoeffs.from_array(self.as_array()[:, :order])


def efd_forward(c: Contour | np.ndarray, N: int = DEFAULT_ORDER) -> EfdCoeffs:
    """Elliptic Fourier transform of order ``N`` of a closed polygon."""
    pts = c.points if isinstance(c, Contour) else Contour(c).points
    if N < 1:
        raise ValueError("order must be >= 1")
    # closed sequence q_0 = q_K = points[0]
    q = np.vstack([pts, pts[:1]])
    d = np.diff(q, axis=0)
    dt = np.hypot(d[:, 0], d[:, 1])
    if np.any(dt == 0):
        raise ValueError("contour has a zero-length segment")
    t = np.concatenate([[0.0], np.cumsum(dt)])
    period = t[-1]
    n = np.arange(1, N + 1)[:, None]
    phi = 2 * np.pi * n * t[None, :] / period
    dcos = np.cos(phi[:, 1:]) - np.cos(phi[:, :-1])
    dsin = np.sin(phi[:, 1:]) - np.sin(phi[:, :-1])
    const = period / (2 * n[:, 0] ** 2 * np.pi**2)
    rx = d[:, 0] / dt
    ry = d[:, 1] / dt
    return EfdCoeffs(
        A=const * (dcos @ rx),
        B=const * (dsin @ rx),
        C=const * (dcos @ ry),
        D=const * (dsin @ ry),
    )


def inverse_basis(order: int, K: int, dtype=np.float64) -> np.ndarray:
    """``[2N, K]`` matrix of cos rows then sin rows at ``t_p = p / K``."""
    t = np.arange(K) / K
    n = np.arange(1, order + 1)[:, None]
    phi = 2 * np.pi * n * t[None, :]
    return np.vstack([np.cos(phi), np.sin(phi)]).astype(dtype)


def efd_inverse(e: EfdCoeffs, K: int, T_period: float = 1.0) -> Contour:
    """Sample the reconstructed curve at ``K`` uniform parameter values (origin-centred)."""
    if K < 3:
        raise ValueError("K must be >= 3")
    arr = e.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite coefficients")
    t = np.arange(K) * T_period / K
    n = np.arange(1, e.order + 1)[:, None]
    phi = 2 * np.pi * n * t[None, :] / T_period
    cos, sin = np.cos(phi), np.sin(phi)
    x = e.A @ cos + e.B @ sin
    y = e.C @ cos + e.D @ sin
    return Contour(np.stack([x, y], axis=1))


def harmonic_amplitudes(e: EfdCoeffs) -> np.ndarray:
    return np.sqrt(e.A**2 + e.B**2 + e.C**2 + e.D**2)


# ---------------------------------------------------------------- tensor versions


def coeffs_to_points(coeffs, K: int):
    """Differentiable inverse transform: ``[B, 4, N]`` coefficients -> ``[B, 2, K]`` points."""
    coeffs = T.as_tensor(coeffs)
    B, _, N = coeffs.shape
    basis = T.Tensor(inverse_basis(N, K), dtype=coeffs.dtype)
    return T.matmul(coeffs.reshape(B, 2, 2 * N), basis)


def amplitudes(coeffs):
    """Smoothed harmonic amplitudes ``[B, N]`` of ``[B, 4, N]`` coefficients."""
    return T.sqrt(T.tsum(T.square(coeffs), axis=1), eps=AMPLITUDE_EPS)


def efd_regularizer(coeffs, n_penalized: int = 3, scale_invariant=False):
    """Shape prior favouring a strong fundamental and weak harmonics 2..4.

    Returns ``-a_1 + sum_{n=2..4} a_n`` averaged over the batch. Accepts an
    ``EfdCoeffs`` or a ``[B, 4, N]`` tensor.

    With ``scale_invariant`` each term becomes ``S * r / (a_1 + sum a_n)`` where
    ``S`` is the current denominator held constant: same value, but the
    gradient along the overall-size direction vanishes. The raw form is
    unbounded below in that direction.
    """
    if isinstance(coeffs, EfdCoeffs):
        coeffs = T.Tensor(coeffs.as_array()[None], dtype=np.float64)
    coeffs = T.as_tensor(coeffs)
    if coeffs.ndim == 2:
        coeffs = coeffs.reshape(1, *coeffs.shape)
    N = coeffs.shape[-1]
    if N < n_penalized + 1:
        raise ValueError(f"regularizer needs order >= {n_penalized + 1}, got {N}")
    a = amplitudes(coeffs)
    hi = T.tsum(a[:, 1:n_penalized + 1], axis=1)
    per = T.sub(hi, a[:, 0])
    if scale_invariant:
        den = T.add(hi, a[:, 0])
        per = T.mul(T.div(per, den), den.data.copy())
    return T.mean(per)
