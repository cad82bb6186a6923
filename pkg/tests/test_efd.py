import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvp import tensor as T
from dvp.data import SceneSpec, contour_center, reference_contour, reference_mask
from dvp.dsl import rotate_shape, scale_shape
from dvp.efd import (
    Contour,
    EfdCoeffs,
    coeffs_to_points,
    efd_forward,
    efd_inverse,
    efd_regularizer,
    harmonic_amplitudes,
)
from dvp.metrics import iou
from dvp.nn import grad_check
from dvp.renderer import RasterSettings, render_mask


def _polygon(n, rx=1.0, ry=1.0, wobble=0.0):
    t = 2 * np.pi * np.arange(n) / n
    r = 1 + wobble * np.cos(3 * t)
    return np.stack([rx * r * np.cos(t), ry * r * np.sin(t)], axis=1)


def _integrated_coeffs(pts, N, dense=200_000):
    """Fourier series of the arc-length parametrised polyline by brute-force quadrature."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    cum = np.concatenate([[0], np.cumsum(seg)])
    T_ = cum[-1]
    t = (np.arange(dense) + 0.5) * T_ / dense
    x = np.interp(t, cum, closed[:, 0])
    y = np.interp(t, cum, closed[:, 1])
    out = np.zeros((4, N))
    for n in range(1, N + 1):
        c, s = np.cos(2 * np.pi * n * t / T_), np.sin(2 * np.pi * n * t / T_)
        out[:, n - 1] = [2 * np.mean(x * c), 2 * np.mean(x * s), 2 * np.mean(y * c), 2 * np.mean(y * s)]
    return out


def _point_to_polyline(p, poly):
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    t = np.clip(((p[:, None] - a) * ab).sum(-1) / (ab * ab).sum(-1), 0, 1)
    proj = a + t[..., None] * ab
    return np.linalg.norm(p[:, None] - proj, axis=-1).min(axis=1)


# ---------------------------------------------------------------- forward


def test_circle_coefficients():
    e = efd_forward(_polygon(256), 8)
    assert abs(e.A[0] - 1) <= 1e-3 and abs(e.D[0] - 1) <= 1e-3
    assert abs(e.B[0]) <= 1e-3 and abs(e.C[0]) <= 1e-3
    assert np.abs(e.as_array()[:, 1:]).max() <= 1e-3


@pytest.mark.parametrize("shape", ["wobbly", "square", "heart"])
def test_forward_matches_quadrature(shape):
    if shape == "wobbly":
        pts = _polygon(97, 9, 5, 0.2)
    else:
        pts = reference_contour(shape, SceneSpec(shape, 15.0, 0.3, 0.8, [1, 1, 1], [0, 0, 0]))
    np.testing.assert_allclose(efd_forward(pts, 6).as_array(), _integrated_coeffs(pts, 6), atol=2e-4)


def test_translation_invariance():
    pts = _polygon(50, 7, 3, 0.1)
    a = efd_forward(pts, 8).as_array()
    b = efd_forward(pts + np.array([5.0, -3.0]), 8).as_array()
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_linearity_in_scale():
    pts = _polygon(40, 4, 2, 0.3)
    np.testing.assert_allclose(efd_forward(2.5 * pts, 8).as_array(), 2.5 * efd_forward(pts, 8).as_array(),
                               atol=1e-9)


def test_reversal_negates_sine_terms():
    pts = _polygon(60, 6, 4, 0.2)
    rev = np.concatenate([pts[:1], pts[:0:-1]])
    a, b = efd_forward(pts, 8), efd_forward(rev, 8)
    np.testing.assert_allclose(b.A, a.A, atol=1e-9)
    np.testing.assert_allclose(b.C, a.C, atol=1e-9)
    np.testing.assert_allclose(b.B, -a.B, atol=1e-9)
    np.testing.assert_allclose(b.D, -a.D, atol=1e-9)


def test_forward_errors():
    with pytest.raises(ValueError):
        efd_forward(np.array([[0.0, 0.0], [1.0, 0.0]]), 4)
    with pytest.raises(ValueError):
        efd_forward(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), 4)
    with pytest.raises(ValueError):
        efd_forward(_polygon(10), 0)


# ---------------------------------------------------------------- inverse


def test_inverse_unit_circle():
    e = EfdCoeffs.zeros(8)
    e.A[0] = e.D[0] = 1.0
    pts = efd_inverse(e, 64).points
    assert pts.shape == (64, 2)
    np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), 1.0, atol=1e-6)


def test_inverse_ellipse_axes():
    e = EfdCoeffs.zeros(4)
    e.A[0], e.D[0] = 2.0, 1.0
    pts = efd_inverse(e, 400).points
    assert np.abs(pts[:, 0]).max() == pytest.approx(2.0, abs=1e-3)
    assert np.abs(pts[:, 1]).max() == pytest.approx(1.0, abs=1e-3)


def test_inverse_independent_of_period():
    e = efd_forward(_polygon(80, 5, 3, 0.2), 8)
    np.testing.assert_allclose(efd_inverse(e, 50, 1.0).points, efd_inverse(e, 50, 7.3).points, atol=1e-12)


def test_inverse_rejects_non_finite():
    e = EfdCoeffs.zeros(2)
    e.A[0] = np.nan
    with pytest.raises(ValueError):
        efd_inverse(e, 16)


def test_round_trip_point_to_curve():
    pts = _polygon(300, 12, 7, 0.15)
    e = efd_forward(pts, 32)
    rec = efd_inverse(e, 200).points
    centred = pts - contour_center(pts)
    radius = np.abs(centred).max()
    assert _point_to_polyline(rec, centred).max() <= 0.01 * radius


def test_batched_points_match_single_inverse():
    e = efd_forward(_polygon(64, 6, 3, 0.2), 8)
    batched = coeffs_to_points(T.Tensor(e.as_array()[None], dtype=np.float64), 40).data[0]
    np.testing.assert_allclose(batched.T, efd_inverse(e, 40).points, atol=1e-12)


def test_heart_fidelity_improves_with_order():
    spec = SceneSpec("heart", 20.0, 0.4, 0.7, [1, 1, 1], [0, 0, 0])
    c = reference_contour("heart", spec)
    ref = reference_mask(spec)
    scores = []
    for N in (2, 4, 8, 16):
        m = render_mask(T.Tensor(efd_forward(c, N).as_array()[None]), RasterSettings(samples=256))[0]
        scores.append(iou(m, ref))
    assert all(b >= a for a, b in zip(scores, scores[1:])), scores


# ---------------------------------------------------------------- amplitudes and regulariser


def test_amplitudes_examples():
    e = EfdCoeffs.zeros(8)
    e.A[0] = e.D[0] = 1.0
    amp = harmonic_amplitudes(e)
    assert amp[0] == pytest.approx(np.sqrt(2))
    np.testing.assert_array_equal(amp[1:], 0)
    np.testing.assert_array_equal(harmonic_amplitudes(EfdCoeffs.zeros(5)), 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-np.pi, np.pi), st.floats(-3, 3).filter(lambda k: abs(k) > 1e-3))
def test_rotation_and_scale_act_on_amplitudes(seed, theta, k):
    coef = np.random.default_rng(seed).normal(size=(4, 8))
    amp = harmonic_amplitudes(EfdCoeffs.from_array(coef))
    with T.precision(np.float64):
        rot = rotate_shape(T.Tensor(coef[None]), T.Tensor([[np.cos(theta), np.sin(theta)]])).data[0]
        sc = scale_shape(T.Tensor(coef[None]), T.Tensor([[k]])).data[0]
    np.testing.assert_allclose(harmonic_amplitudes(EfdCoeffs.from_array(rot)), amp, atol=1e-6)
    np.testing.assert_allclose(harmonic_amplitudes(EfdCoeffs.from_array(sc)), abs(k) * amp, atol=1e-6)


def test_regularizer_values():
    e = EfdCoeffs.zeros(8)
    e.A[0] = e.D[0] = 1.0
    with T.precision(np.float64):
        val = float(efd_regularizer(e).data)
        zero = float(efd_regularizer(EfdCoeffs.zeros(8)).data)
    # amplitudes are smoothed as sqrt(x + 1e-12), so zero harmonics contribute 1e-6 each
    assert val == pytest.approx(-np.sqrt(2 + 1e-12) + 3e-6, abs=1e-12)
    assert val == pytest.approx(-np.sqrt(2), abs=1e-5)
    assert zero == pytest.approx(0.0, abs=1e-5)


def test_regularizer_matches_formula_on_batch():
    coef = np.random.default_rng(1).normal(size=(3, 4, 8))
    amp = np.sqrt((coef**2).sum(axis=1))
    expected = np.mean(-amp[:, 0] + amp[:, 1:4].sum(axis=1))
    with T.precision(np.float64):
        assert float(efd_regularizer(T.Tensor(coef)).data) == pytest.approx(expected, abs=1e-9)


def test_regularizer_gradient():
    coef = np.random.default_rng(2).normal(size=(2, 4, 8))
    with T.precision(np.float64):
        x = T.Tensor(coef)
        assert grad_check(efd_regularizer, x, h=1e-5) <= 1e-3


def test_regularizer_needs_order_four():
    with pytest.raises(ValueError):
        efd_regularizer(EfdCoeffs.zeros(3))


def test_contour_validation():
    with pytest.raises(ValueError):
        Contour(np.zeros((2, 2)))
