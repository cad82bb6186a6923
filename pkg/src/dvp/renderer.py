"""Soft rasterisation of EFD shapes via a signed distance field.

Canvas coordinates are in pixels with x to the right (columns) and y down
(rows); pixel ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)`` and the
canvas centre is ``(W / 2, H / 2)``.

The signed distance is split in two: a non-differentiable search for the
nearest polygon segment and the nonzero winding number (a numba kernel), and
a differentiable point-to-segment distance on the selected segments built from
tape primitives. The distance is differentiable almost everywhere, and the
gradient only flows through the nearest segment anyway.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import tensor as T
from .dsl.types import Scene
from .efd import coeffs_to_points

DEGENERATE_EPS = 1e-6
_SQRT_EPS = 1e-12


@dataclass
class RasterSettings:
    height: int = 64
    width: int = 64
    samples: int = 64  # contour samples K
    tau: float = 1.0  # smoothing temperature in pixels
    supersample: int = 1  # for hard masks

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError("canvas must be at least 8x8")
        if self.samples < 8:
            raise ValueError("need at least 8 contour samples")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")

    @property
    def center(self):
        return np.array([self.width / 2.0, self.height / 2.0])


def pixel_grid(settings: RasterSettings, supersample: int = 1) -> np.ndarray:
    """``[H*s*W*s, 2]`` (x, y) sample positions, row-major."""
    s = supersample
    ys = (np.arange(settings.height * s) + 0.5) / s
    xs = (np.arange(settings.width * s) + 0.5) / s
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def sample_polygon(shape, settings: RasterSettings):
    """Sample the contour and centre it on the canvas.

    Returns ``(points [B, K, 2], degenerate [B] bool)``. Degenerate (all-zero)
    shapes are flagged; their points collapse onto the canvas centre.
    """
    shape = T.as_tensor(shape)
    if shape.ndim == 2:
        shape = shape.reshape(1, *shape.shape)
    degenerate = np.abs(shape.data).reshape(shape.shape[0], -1).max(axis=1) < DEGENERATE_EPS
    pts = coeffs_to_points(shape, settings.samples)  # [B, 2, K]
    pts = T.sub(pts, T.mean(pts, axis=2, keepdims=True))
    pts = T.add(T.transpose(pts, (0, 2, 1)), settings.center.astype(pts.dtype))
    return pts, degenerate


@numba.njit(cache=True, fastmath=True)
def _nearest_and_winding(poly, grid):
    B, K, _ = poly.shape
    P = grid.shape[0]
    seg = np.empty((B, P), dtype=np.int64)
    wind = np.empty((B, P), dtype=np.int64)
    for b in range(B):
        for p in range(P):
            px = grid[p, 0]
            py = grid[p, 1]
            best = 1e300
            best_k = 0
            w = 0
            for k in range(K):
                ax = poly[b, k, 0]
                ay = poly[b, k, 1]
                k2 = k + 1 if k + 1 < K else 0
                bx = poly[b, k2, 0]
                by = poly[b, k2, 1]
                abx = bx - ax
                aby = by - ay
                apx = px - ax
                apy = py - ay
                den = abx * abx + aby * aby + 1e-300
                t = min(max((apx * abx + apy * aby) / den, 0.0), 1.0)
                dx = apx - t * abx
                dy = apy - t * aby
                d2 = dx * dx + dy * dy
                if d2 < best:
                    best = d2
                    best_k = k
                # winding number, half-open crossing rule
                cross = abx * apy - aby * apx
                if ay <= py:
                    if by > py and cross > 0:
                        w += 1
                else:
                    if by <= py and cross < 0:
                        w -= 1
            seg[b, p] = best_k
            wind[b, p] = w
    return seg, wind


def nearest_segments(poly: np.ndarray, grid: np.ndarray):
    """Index of the nearest segment and winding number per (batch, sample)."""
    return _nearest_and_winding(np.ascontiguousarray(poly, dtype=np.float64),
                                np.ascontiguousarray(grid, dtype=np.float64))


def inside_mask(poly: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Nonzero-winding inside test, ``[B, P]`` bool."""
    _, wind = nearest_segments(poly, grid)
    return wind != 0


def signed_distance(poly, grid):
    """Signed distance ``[B, P]`` from sample positions to the closed polygon.

    Negative inside (nonzero winding rule). ``poly`` is a ``[B, K, 2]`` tensor,
    ``grid`` a ``[P, 2]`` array.
    """
    poly = T.as_tensor(poly)
    if poly.ndim == 2:
        poly = poly.reshape(1, *poly.shape)
    B, K, _ = poly.shape
    seg, wind = nearest_segments(poly.data, grid)
    idx_a = np.repeat(seg[:, :, None], 2, axis=2)
    idx_b = np.repeat(((seg + 1) % K)[:, :, None], 2, axis=2)
    a = T.gather(poly, idx_a, axis=1)  # [B, P, 2]
    b = T.gather(poly, idx_b, axis=1)
    p = T.Tensor(grid[None], dtype=poly.dtype)
    ab = T.sub(b, a)
    ap = T.sub(p, a)
    den = T.add(T.tsum(T.square(ab), axis=2), 1e-12)
    t = T.clip(T.div(T.tsum(T.mul(ap, ab), axis=2), den), 0.0, 1.0)
    diff = T.sub(ap, T.mul(T.reshape(t, (B, -1, 1)), ab))
    dist = T.sqrt(T.tsum(T.square(diff), axis=2), eps=_SQRT_EPS)
    sign = np.where(wind != 0, -1.0, 1.0).astype(poly.dtype)
    return T.mul(dist, sign)


def rasterize_alpha(shape, settings: RasterSettings):
    """Soft coverage ``[B, H, W]`` = sigmoid(-sdf / tau); degenerate shapes give zeros."""
    pts, degenerate = sample_polygon(shape, settings)
    d = signed_distance(pts, pixel_grid(settings))
    alpha = T.sigmoid(T.mul(d, -1.0 / settings.tau))
    if degenerate.any():
        alpha = T.mul(alpha, (~degenerate).astype(alpha.dtype)[:, None])
    return T.reshape(alpha, (-1, settings.height, settings.width))


def compose_scene(alpha, fg, bg):
    """``alpha * fg + (1 - alpha) * bg`` -> ``[B, 3, H, W]``."""
    alpha, fg, bg = T.as_tensor(alpha), T.as_tensor(fg), T.as_tensor(bg)
    B = alpha.shape[0]
    a = T.reshape(alpha, (B, 1) + alpha.shape[1:])
    fg4 = T.reshape(fg, (B, 3, 1, 1))
    bg4 = T.reshape(bg, (B, 3, 1, 1))
    return T.add(bg4, T.mul(a, T.sub(fg4, bg4)))


def render(scene: Scene, settings: RasterSettings | None = None):
    settings = settings or RasterSettings()
    return compose_scene(rasterize_alpha(scene.shape, settings), scene.obj, scene.bg)


def render_mask(scene_or_shape, settings: RasterSettings | None = None) -> np.ndarray:
    """Hard figure/ground mask ``[B, H, W]`` (bool); never differentiated.

    With ``settings.supersample > 1`` a pixel is foreground when at least half
    of its sub-samples are inside.
    """
    settings = settings or RasterSettings()
    shape = scene_or_shape.shape if isinstance(scene_or_shape, Scene) else scene_or_shape
    with T.no_grad():
        pts, degenerate = sample_polygon(shape, settings)
    s = settings.supersample
    B = pts.shape[0]
    H, W = settings.height, settings.width
    if s == 1:
        # alpha >= 0.5 is exactly "inside or on the boundary"
        with T.no_grad():
            d = signed_distance(pts, pixel_grid(settings)).data
        mask = (d <= 0).reshape(B, H, W)
    else:
        inside = inside_mask(pts.data, pixel_grid(settings, s))
        cov = inside.reshape(B, H, s, W, s).mean(axis=(2, 4))
        mask = cov >= 0.5
    mask[degenerate] = False
    return mask
