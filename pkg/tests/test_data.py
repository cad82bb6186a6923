import json

import numpy as np
import pytest
from PIL import Image

from dvp import tensor as T
from dvp.data import (
    CATEGORIES,
    OOS_CATEGORIES,
    Dataset,
    DatasetConfig,
    GeneratorConfig,
    SceneSpec,
    add_noise,
    build_dataset,
    example_rng,
    reference_contour,
    reference_mask,
    render_reference,
    sample_scene_spec,
    subset_indices,
    to_float,
)
from dvp.efd import efd_forward
from dvp.metrics import iou
from dvp.renderer import RasterSettings, render_mask


def _spec(cat, scale=10.0, angle=0.0, aspect=1.0, fg=(1, 1, 1), bg=(0, 0, 0)):
    return SceneSpec(cat, scale, angle, aspect, list(fg), list(bg))


def _set_distance(a, b):
    """Hausdorff distance between two point sets."""
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return max(d.min(0).max(), d.min(1).max())


# ---------------------------------------------------------------- contours


def test_square_half_width():
    pts = reference_contour("square", _spec("square", 10.0))
    assert len(pts) == 256
    np.testing.assert_allclose(np.abs(pts).max(axis=0), [10, 10], atol=1e-9)
    # every sample lies on the boundary of the box
    np.testing.assert_allclose(np.abs(pts).max(axis=1), 10, atol=1e-9)


def test_ellipse_aspect_one_is_circle():
    pts = reference_contour("ellipse", _spec("ellipse", 12.0, angle=0.7, aspect=1.0))
    np.testing.assert_allclose(np.hypot(pts[:, 0], pts[:, 1]), 12.0, atol=1e-9)


def test_ellipse_axes():
    pts = reference_contour("ellipse", _spec("ellipse", 20.0, aspect=0.5))
    np.testing.assert_allclose(np.abs(pts).max(axis=0), [20, 10], atol=1e-9)


def test_heart_symmetric_about_vertical_axis():
    pts = reference_contour("heart", _spec("heart", 15.0))
    assert _set_distance(pts, pts * [-1, 1]) <= 1e-9
    # half-extent is measured from the bounding-box centre
    assert ((pts.max(0) - pts.min(0)) / 2).max() == pytest.approx(15.0, abs=1e-9)


def test_rotation_of_contour():
    a = reference_contour("heart", _spec("heart", 15.0))
    b = reference_contour("heart", _spec("heart", 15.0, angle=np.pi / 2))
    np.testing.assert_allclose(b, a @ np.array([[0, -1], [1, 0]]).T, atol=1e-9)


@pytest.mark.parametrize("cat", CATEGORIES + OOS_CATEGORIES)
def test_contours_are_simple_and_closed(cat):
    pts = reference_contour(cat, _spec(cat, 20.0, angle=0.3, aspect=0.7))
    assert pts.shape == (256, 2) and np.isfinite(pts).all()
    assert len(np.unique(np.round(pts, 9), axis=0)) == 256
    assert reference_mask(_spec(cat, 20.0, angle=0.3, aspect=0.7)).sum() > 100


def test_unknown_category():
    with pytest.raises(ValueError):
        reference_contour("star", _spec("star"))


# ---------------------------------------------------------------- reference renderer


def test_uniform_when_colours_equal():
    img = render_reference(_spec("heart", 20, fg=(0.3, 0.6, 0.9), bg=(0.3, 0.6, 0.9)))
    np.testing.assert_allclose(img, np.broadcast_to(np.array([0.3, 0.6, 0.9])[:, None, None], img.shape))


def test_antialiased_edges():
    img = render_reference(_spec("ellipse", 17.3, angle=0.4, aspect=0.6))
    assert img.shape == (3, 64, 64)
    assert ((img > 0) & (img < 1)).any()
    assert set(np.unique(img)) > {0.0, 1.0}


def test_square_area_matches_geometry():
    for scale, angle in [(8.0, 0.0), (13.5, 0.3), (20.0, 1.1), (27.0, 0.0)]:
        img = render_reference(_spec("square", scale, angle))
        assert img[0].sum() == pytest.approx((2 * scale) ** 2, rel=0.02)


def test_reference_render_deterministic():
    s = sample_scene_spec(example_rng(3, 17))
    np.testing.assert_array_equal(render_reference(s), render_reference(s))
    np.testing.assert_array_equal(sample_scene_spec(example_rng(3, 17)).to_json(), s.to_json())


def test_reference_and_model_renderer_agree():
    # the two code paths share nothing past the contour: matplotlib fill vs SDF rasteriser
    worst = 1.0
    for i in range(40):
        s = sample_scene_spec(example_rng(11, i), GeneratorConfig(categories=CATEGORIES))
        coef = efd_forward(reference_contour(s.category, s), 32).as_array()[None]
        m = render_mask(T.Tensor(coef, dtype=np.float64), RasterSettings(samples=256))[0]
        worst = min(worst, iou(m, reference_mask(s)))
    assert worst >= 0.95


# ---------------------------------------------------------------- sampling


def test_category_frequencies():
    n = 10_000
    cats = [sample_scene_spec(example_rng(0, i)).category for i in range(n)]
    sigma = np.sqrt(n * (1 / 3) * (2 / 3))
    for c in CATEGORIES:
        assert abs(cats.count(c) - n / 3) <= 3 * sigma


def test_sampled_ranges_and_contrast():
    for i in range(2000):
        s = sample_scene_spec(example_rng(1, i))
        assert 8 <= s.scale <= 28
        assert 0.5 <= s.aspect <= 1.0
        assert 0 <= s.angle < 2 * np.pi
        obj, bg = np.array(s.obj_rgb), np.array(s.bg_rgb)
        assert ((obj >= 0) & (obj <= 1) & (bg >= 0) & (bg <= 1)).all()
        assert np.abs(obj - bg).max() >= 0.15


# ---------------------------------------------------------------- storage


def test_build_small_dataset(tmp_path):
    man = build_dataset(DatasetConfig(n=100, seed=5, oos=True), tmp_path)
    assert man["counts"] == {"train": 90, "val": 5, "test": 5, "oos": 5}
    assert len(list((tmp_path / "images").rglob("*.png"))) == 105
    lines = sum(len((tmp_path / "labels" / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test"))
    assert lines == 100
    assert json.loads((tmp_path / "manifest.json").read_text())["seed"] == 5

    ds = Dataset(tmp_path)
    imgs = ds.images("val")
    assert imgs.shape == (5, 3, 64, 64) and imgs.dtype == np.uint8
    lab = ds.labels("val")
    assert [s.id for s in lab] == man["splits"]["val"]
    # images decode back to the reference render
    ref = render_reference(lab[0])
    assert np.abs(to_float(imgs[:1])[0] - ref).max() <= 0.5 / 255 + 1e-6
    assert {s.category for s in ds.labels("oos")} <= set(OOS_CATEGORIES)
    assert len(ds.train_indices(0.05)) == round(90 * 0.05)


def test_builds_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    build_dataset(DatasetConfig(n=30, seed=2), a)
    build_dataset(DatasetConfig(n=30, seed=2), b, workers=3)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_example_depends_only_on_seed_and_index(tmp_path):
    # example i is the same whether the dataset has 30 or 60 examples
    small = build_dataset(DatasetConfig(n=30, seed=4), tmp_path / "s")
    build_dataset(DatasetConfig(n=60, seed=4), tmp_path / "l")
    s_lab = Dataset(tmp_path / "s").labels("train")
    l_lab = {x.id: x for x in Dataset(tmp_path / "l").labels("train")}
    for x in s_lab:
        assert x.to_json() == l_lab[x.id].to_json()
    assert small["counts"]["train"] == 26  # 30 * 5% rounds to 2 per held-out split


def test_subset_sizes():
    one = subset_indices(90_000, 0.01, 0)
    five = subset_indices(90_000, 0.05, 0)
    assert len(one) == len(set(one)) == 900
    assert len(five) == len(set(five)) == 4500
    assert min(one) >= 0 and max(five) < 90_000
    assert one == subset_indices(90_000, 0.01, 0)


def test_dataset_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        Dataset(tmp_path)
    with pytest.raises(ValueError):
        build_dataset(DatasetConfig(n=2), tmp_path / "x")


def test_png_is_lossless_rgb(tmp_path):
    build_dataset(DatasetConfig(n=10, seed=0), tmp_path)
    im = Image.open(next((tmp_path / "images" / "train").glob("*.png")))
    assert im.mode == "RGB" and im.size == (64, 64)


# ---------------------------------------------------------------- noise


def test_noise():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(add_noise(img, 0.0, rng), img)
    for sigma in (0.1, 0.4, 2.0):
        out = add_noise(img, sigma, rng)
        assert out.min() >= 0 and out.max() <= 1 and out.dtype == img.dtype
    with pytest.raises(ValueError):
        add_noise(img, -0.1, rng)


@pytest.mark.parametrize("sigma", [0.05, 0.1])
def test_noise_std_on_mid_gray(sigma):
    # at these levels clamping at 0 and 1 is more than 5 sigma away
    img = np.full((3, 256, 256), 0.5)
    diff = add_noise(img, sigma, np.random.default_rng(1)) - img
    assert diff.std() == pytest.approx(sigma, rel=0.05)
    assert abs(diff.mean()) <= 0.05 * sigma
