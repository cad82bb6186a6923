import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from dvp.data import CATEGORIES, example_rng, render_reference, sample_scene_spec, to_uint8
from dvp.metrics import (
    EvalReport,
    ari,
    background_color_error,
    calibrate_classifier,
    calibration_slice,
    classifier_accuracy,
    classify,
    evaluate,
    evaluate_arrays,
    iou,
    mse,
    noise_sweep,
    prototype_usage,
    ssim,
    write_csv,
)
from dvp.model import DVPModel


def _ari_pairs(a, b, chunk=512):
    """Adjusted Rand index by explicit enumeration of every pixel pair."""
    a, b = a.ravel().astype(int), b.ravel().astype(int)
    n = a.size
    n11 = n10 = n01 = n00 = 0
    for s in range(0, n, chunk):
        i = np.arange(s, min(s + chunk, n))[:, None]
        j = np.arange(n)[None, :]
        upper = j > i
        sa = (a[i] == a[j])[upper]
        sb = (b[i] == b[j])[upper]
        n11 += int(np.sum(sa & sb))
        n10 += int(np.sum(sa & ~sb))
        n01 += int(np.sum(~sa & sb))
        n00 += int(np.sum(~sa & ~sb))
    # Hubert-Arabie pair-count form
    den = (n11 + n01) * (n01 + n00) + (n11 + n10) * (n10 + n00)
    return 2.0 * (n11 * n00 - n01 * n10) / den


def _iou_sets(a, b):
    A = {tuple(p) for p in np.argwhere(a)}
    B = {tuple(p) for p in np.argwhere(b)}
    return 1.0 if not (A | B) else len(A & B) / len(A | B)


def _textured(seed, shape=(3, 32, 32)):
    rng = np.random.default_rng(seed)
    return np.clip(rng.uniform(0.2, 0.8, size=shape) + 0.1 * np.sin(np.arange(shape[-1]) / 2.0), 0, 1)


# ---------------------------------------------------------------- MSE


def test_mse_examples():
    black, white = np.zeros((3, 8, 8)), np.ones((3, 8, 8))
    half = black.copy()
    half[:, :, :4] = 1
    assert mse(black, black) == 0
    assert mse(black, white) == 1
    assert mse(half, black) == 0.5
    with pytest.raises(ValueError):
        mse(black, np.zeros((3, 8, 7)))


# ---------------------------------------------------------------- SSIM


def test_ssim_identity_and_inversion():
    x = _textured(0)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, 1 - x) < 0


def test_ssim_shift_invariance():
    x = _textured(1) * 0.5 + 0.2
    y = np.clip(x + np.random.default_rng(2).normal(0, 0.05, x.shape), 0, 1)
    assert abs(ssim(x, y) - ssim(x + 0.1, y + 0.1)) <= 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_skimage(seed):
    x = _textured(seed, (3, 40, 40))
    y = np.clip(x + np.random.default_rng(seed + 10).normal(0, 0.1, x.shape), 0, 1)
    ref = structural_similarity(x, y, data_range=1.0, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ssim(x, y) == pytest.approx(ref, abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


# ---------------------------------------------------------------- IoU and ARI


def test_iou_examples():
    a = np.zeros((40, 40), bool)
    a[:10, :10] = True
    b = np.zeros((40, 40), bool)
    b[:20, :20] = True
    c = np.zeros((40, 40), bool)
    c[30:, 30:] = True
    assert iou(a, a) == 1.0
    assert iou(a, c) == 0.0
    assert iou(a, b) == 0.25
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ValueError):
        iou(np.full((4, 4), 0.5), np.zeros((4, 4)))


def test_ari_examples():
    a = np.zeros((8, 8), bool)
    a[2:5, 1:6] = True
    assert ari(a, a) == 1.0
    assert ari(a, ~a) == 1.0
    assert ari(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    with pytest.raises(ValueError):
        ari(a, a[:4])


def test_ari_left_vs_top_half_brute_force():
    a = np.zeros((64, 64), bool)
    a[:, :32] = True
    b = np.zeros((64, 64), bool)
    b[:32] = True
    assert ari(a, b) == pytest.approx(_ari_pairs(a, b), abs=1e-9)


def test_ari_random_8x8_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.random((8, 8)) < rng.uniform(0.1, 0.9)
        b = rng.random((8, 8)) < rng.uniform(0.1, 0.9)
        assert ari(a, b) == pytest.approx(_ari_pairs(a, b), abs=1e-9)
        assert iou(a, b) == pytest.approx(_iou_sets(a, b), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16)) < rng.uniform(0, 1)
    b = rng.random((16, 16)) < rng.uniform(0, 1)
    x, y = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
    assert abs(mse(x, y) - mse(y, x)) <= 1e-9
    assert abs(ssim(x, y) - ssim(y, x)) <= 1e-9
    assert abs(iou(a, b) - iou(b, a)) <= 1e-9
    assert abs(ari(a, b) - ari(b, a)) <= 1e-9
    assert ari(a, b) == ari(a, ~b)
    assert ari(a, b) <= 1 and iou(a, b) <= 1


# ---------------------------------------------------------------- reports


def test_report_aggregates_are_means():
    rng = np.random.default_rng(0)
    imgs = rng.uniform(size=(5, 3, 16, 16))
    rec = np.clip(imgs + rng.normal(0, 0.1, imgs.shape), 0, 1)
    pm = rng.random((5, 16, 16)) < 0.4
    gm = rng.random((5, 16, 16)) < 0.4
    pm[3], gm[3] = False, False
    rep = evaluate_arrays(imgs, rec, pm, gm)
    agg = rep.aggregate()
    for k in ("mse", "ssim", "iou", "ari"):
        assert agg[k] == pytest.approx(np.mean(getattr(rep, k)), abs=1e-12)
    assert rep.empty == [False, False, False, True, False]
    assert rep.iou[3] == 1.0
    rep.exclude_empty = True
    assert rep.aggregate()["iou"] == pytest.approx(np.mean([v for i, v in enumerate(rep.iou) if i != 3]))
    assert rep.to_json()["aggregate"] == rep.aggregate()


def test_background_colour_error():
    img = np.zeros((1, 3, 8, 8))
    img[0, :, :, :] = np.array([0.2, 0.4, 0.6])[:, None, None]
    m = np.zeros((1, 8, 8), bool)
    m[0, 2:6, 2:6] = True
    img[0][:, m[0]] = 1.0
    err = background_color_error(img, np.array([[0.3, 0.4, 0.5]]), m)
    assert err[0] == pytest.approx((0.1 + 0.0 + 0.1) / 3)


# ---------------------------------------------------------------- prototypes


def test_calibration_mapping_is_a_function():
    ids = [0, 0, 1, 1, 1, 2, 5]
    labels = ["heart", "heart", "square", "ellipse", "square", "ellipse", "heart"]
    m = calibrate_classifier(ids, labels, 8)
    assert set(m) == set(range(8))
    assert m[0] == "heart" and m[1] == "square" and m[2] == "ellipse"
    assert all(v in CATEGORIES for v in m.values())


def test_calibration_slice():
    specs = [sample_scene_spec(example_rng(0, i)) for i in range(60)]
    idx = calibration_slice(specs, per_category=5)
    assert len(idx) == 15
    assert sorted(idx) == idx
    for c in CATEGORIES:
        assert sum(specs[i].category == c for i in idx) == 5


def test_usage():
    w = np.random.default_rng(0).dirichlet(np.ones(8), size=20)
    u = prototype_usage(weights=w)
    assert u.sum() == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(prototype_usage(weights=w[:1]), w[0], atol=1e-12)


@pytest.fixture(scope="module")
def tiny():
    specs = [sample_scene_spec(example_rng(3, i)) for i in range(90)]
    imgs = np.stack([to_uint8(render_reference(s)) for s in specs])
    model = DVPModel("dvp-p", seed=1, channels_scale=0.125)
    model.eval()
    return model, imgs, specs


def test_untrained_classifier_near_chance(tiny):
    model, imgs, specs = tiny
    acc, mapping = classifier_accuracy(model, imgs[:45], specs[:45], imgs[45:], specs[45:])
    assert abs(acc - 1 / 3) <= 0.15
    assert set(mapping) == set(range(8))
    with pytest.raises(ValueError):
        classify(DVPModel("dvp-d", seed=0, channels_scale=0.125), imgs[:2])


def test_noise_sweep_rows(tiny, tmp_path):
    model, imgs, specs = tiny
    rows = noise_sweep(model, imgs[:12], specs[:12], [0.0, 0.1, 0.3])
    assert [r["sigma"] for r in rows] == [0.0, 0.1, 0.3]
    clean, _ = evaluate(model, imgs[:12], specs[:12])
    for k, v in clean.aggregate().items():
        assert rows[0][k] == pytest.approx(v, abs=1e-12)
    write_csv(rows, tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    with pytest.raises(ValueError):
        noise_sweep(model, imgs[:2], specs[:2], [0.2, 0.1])


def test_empty_report():
    assert np.isnan(EvalReport().aggregate()["iou"])
