"""Reconstruction metrics, prototype classifier and evaluation reports."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np

from .data import CATEGORIES, SceneSpec, add_noise, reference_mask, to_float

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def mse(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    w = np.lib.stride_tricks.sliding_window_view(img, k, axis=-1) @ g
    w = np.lib.stride_tricks.sliding_window_view(w, k, axis=-2) @ g
    return w


def ssim(x, y, data_range=1.0) -> float:
    """Mean single-scale SSIM over valid window positions and channels.

    Images are ``[C, H, W]`` or ``[H, W]``.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def _check_binary(m):
    m = np.asarray(m)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise ValueError("mask must be binary")
        m = m.astype(bool)
    return m


def iou(a, b) -> float:
    a, b = _check_binary(a), _check_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def ari(a, b) -> float:
    """Adjusted Rand index between two figure/ground partitions."""
    a, b = _check_binary(a), _check_binary(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a, b = a.ravel(), b.ravel()
    n = a.size
    n11 = int(np.sum(a & b))
    n10 = int(np.sum(a & ~b))
    n01 = int(np.sum(~a & b))
    n00 = n - n11 - n10 - n01
    index = sum(comb(v, 2) for v in (n11, n10, n01, n00))
    rows = comb(n11 + n10, 2) + comb(n01 + n00, 2)
    cols = comb(n11 + n01, 2) + comb(n10 + n00, 2)
    total = comb(n, 2)
    expected = rows * cols / total
    max_index = (rows + cols) / 2
    if max_index == expected:
        # both partitions are a single cluster
        return 1.0
    return float((index - expected) / (max_index - expected))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    mse: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    ari: list = field(default_factory=list)
    empty: list = field(default_factory=list)  # both masks empty
    accuracy: float | None = None
    info: dict = field(default_factory=dict)
    exclude_empty: bool = False

    def _mean(self, key):
        vals = np.asarray(getattr(self, key), dtype=np.float64)
        if self.exclude_empty and key in ("iou", "ari") and len(self.empty):
            vals = vals[~np.asarray(self.empty, dtype=bool)]
        return float(vals.mean()) if vals.size else float("nan")

    def aggregate(self):
        out = {k: self._mean(k) for k in ("mse", "ssim", "iou", "ari")}
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out

    def to_json(self):
        d = asdict(self)
        d["aggregate"] = self.aggregate()
        return d


def evaluate_arrays(images, recon, pred_masks, gt_masks, exclude_empty=False) -> EvalReport:
    rep = EvalReport(exclude_empty=exclude_empty)
    for x, r, pm, gm in zip(images, recon, pred_masks, gt_masks):
        rep.mse.append(mse(x, r))
        rep.ssim.append(ssim(x, r))
        rep.iou.append(iou(pm, gm))
        rep.ari.append(ari(pm, gm))
        rep.empty.append(bool(not pm.any() and not gm.any()))
    return rep


def ground_truth_masks(specs, cfg=None):
    return np.stack([reference_mask(s, cfg) for s in specs])


def evaluate(model, images_u8, specs, gt_masks=None, batch_size=128, exclude_empty=False, preds=None):
    """Evaluate ``model`` on uint8 images with ground-truth specs."""
    x = to_float(images_u8) if images_u8.dtype == np.uint8 else np.asarray(images_u8, dtype=np.float32)
    if gt_masks is None:
        gt_masks = ground_truth_masks(specs)
    preds = preds or model.predict(x, batch_size)
    rep = evaluate_arrays(x, preds["recon"], preds["mask"], gt_masks, exclude_empty)
    rep.info["n"] = len(x)
    return rep, preds


def background_color_error(images, pred_bg, gt_masks):
    """Per-image mean abs. error between predicted bg colour and the image's background pixels."""
    errs = []
    for x, bg, m in zip(images, pred_bg, gt_masks):
        pix = x[:, ~m]
        errs.append(float(np.mean(np.abs(pix - np.asarray(bg)[:, None]))) if pix.size else 0.0)
    return np.asarray(errs)


# ---------------------------------------------------------------- prototypes


def calibrate_classifier(prototype_ids, labels, n_prototypes):
    """Majority mapping prototype -> category; unused prototypes map to the most common label."""
    fallback = Counter(labels).most_common(1)[0][0]
    mapping = {}
    for p in range(n_prototypes):
        votes = Counter(l for i, l in zip(prototype_ids, labels) if i == p)
        mapping[p] = votes.most_common(1)[0][0] if votes else fallback
    return mapping


def classify(model, images, mapping=None):
    """Predicted prototype index (and category, given a calibration mapping) per image."""
    if not model.uses_prototypes:
        raise ValueError("classification needs a model with a Prototype function")
    x = to_float(images) if images.dtype == np.uint8 else images
    logits = model.predict(x)["logits"]
    idx = np.argmax(logits, axis=1)
    if mapping is None:
        return idx
    return idx, [mapping[int(i)] for i in idx]


def calibration_slice(specs, per_category=100, categories=CATEGORIES):
    """Indices of the first ``per_category`` examples of each category."""
    counts = Counter()
    out = []
    for i, s in enumerate(specs):
        if s.category in categories and counts[s.category] < per_category:
            counts[s.category] += 1
            out.append(i)
    return out


def classifier_accuracy(model, calib_images, calib_specs, test_images, test_specs):
    ids = classify(model, calib_images)
    mapping = calibrate_classifier(ids.tolist(), [s.category for s in calib_specs],
                                   model.dsl.Prototype.n_prototypes)
    _, pred = classify(model, test_images, mapping)
    acc = float(np.mean([p == s.category for p, s in zip(pred, test_specs)]))
    return acc, mapping


def prototype_usage(model=None, images=None, weights=None):
    """Normalised per-prototype sum of gating weights."""
    if weights is None:
        if not model.uses_prototypes:
            raise ValueError("usage needs a model with a Prototype function")
        x = to_float(images) if images.dtype == np.uint8 else images
        weights = model.predict(x)["weights"]
    s = np.asarray(weights, dtype=np.float64).sum(axis=0)
    return s / s.sum()


# ---------------------------------------------------------------- noise


def noise_sweep(model, images_u8, specs, sigmas, seed=0, gt_masks=None):
    """One aggregate row per noise level."""
    sigmas = list(sigmas)
    if any(s < 0 for s in sigmas) or sigmas != sorted(sigmas):
        raise ValueError("sigmas must be non-negative and ascending")
    clean = to_float(images_u8)
    if gt_masks is None:
        gt_masks = ground_truth_masks(specs)
    rows = []
    for k, sigma in enumerate(sigmas):
        rng = np.random.default_rng([seed, k])
        noisy = add_noise(clean, sigma, rng)
        # metrics compare against the clean scene
        preds = model.predict(noisy)
        rep = evaluate_arrays(clean, preds["recon"], preds["mask"], gt_masks)
        rows.append({"sigma": sigma, **rep.aggregate()})
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)


def write_report(rep: EvalReport, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rep.to_json(), fh, indent=1)


def spec_list(specs):
    return [s if isinstance(s, SceneSpec) else SceneSpec.from_dict(s) for s in specs]
