"""Synthetic single-object scenes: generator, reference renderer, storage, noise."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath
from PIL import Image

FORMAT_VERSION = 1
CATEGORIES = ("ellipse", "square", "heart")
OOS_CATEGORIES = ("hourglass", "triangle", "lshape")
CONTOUR_POINTS = 256
SPLITS = ("train", "val", "test")


@dataclass
class SceneSpec:
    category: str
    scale: float
    angle: float
    aspect: float
    obj_rgb: list
    bg_rgb: list
    id: int = 0
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GeneratorConfig:
    image_size: int = 64
    scale_range: tuple = (8.0, 28.0)
    aspect_range: tuple = (0.5, 1.0)
    min_contrast: float = 0.15
    supersample: int = 4
    categories: tuple = CATEGORIES


@dataclass
class DatasetConfig:
    n: int = 100_000
    seed: int = 0
    split_fractions: tuple = (0.9, 0.05, 0.05)
    subset_fractions: tuple = (0.05, 0.01)
    oos: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def split_sizes(self):
        n_val = int(round(self.n * self.split_fractions[1]))
        n_test = int(round(self.n * self.split_fractions[2]))
        return {"train": self.n - n_val - n_test, "val": n_val, "test": n_test}


# ---------------------------------------------------------------- contours


def _resample_polygon(vertices, n=CONTOUR_POINTS):
    """Perimeter-uniform samples along a closed polygon."""
    v = np.asarray(vertices, dtype=np.float64)
    closed = np.vstack([v, v[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(n) * cum[-1] / n
    x = np.interp(s, cum, closed[:, 0])
    y = np.interp(s, cum, closed[:, 1])
    return np.stack([x, y], axis=1)


def _unit_half_extent(pts):
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pts = pts - (lo + hi) / 2
    return pts / np.abs(pts).max()


def contour_center(pts):
    """Arc-length centroid of a closed polygon (the DC term of its EFD)."""
    closed = np.vstack([pts, pts[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    mids = (closed[1:] + closed[:-1]) / 2
    return (mids * seg[:, None]).sum(axis=0) / seg.sum()


def unit_contour(category, aspect=1.0, scale=1.0):
    """Canonical contour (y down) with half-extent 1 before scaling by ``scale``."""
    t = 2 * np.pi * np.arange(CONTOUR_POINTS) / CONTOUR_POINTS
    if category == "ellipse":
        return np.stack([np.cos(t), aspect * np.sin(t)], axis=1)
    if category == "square":
        return _resample_polygon([(-1, -1), (1, -1), (1, 1), (-1, 1)])
    if category == "heart":
        x = 16 * np.sin(t) ** 3
        y = 13 * np.cos(t) - 5 * np.cos(2 * t) - 2 * np.cos(3 * t) - np.cos(4 * t)
        # flip y so the heart is upright in image coordinates
        return _unit_half_extent(np.stack([x, -y], axis=1))
    if category == "triangle":
        ang = np.deg2rad([-90, 30, 150])
        return _resample_polygon(np.stack([np.cos(ang), np.sin(ang)], axis=1))
    if category == "hourglass":
        # 2-px throat after scaling keeps the contour simple
        w = 1.0 / max(scale, 1.0)
        return _resample_polygon([(-1, -1), (1, -1), (w, 0), (1, 1), (-1, 1), (-w, 0)])
    if category == "lshape":
        v = np.array([(0, 0), (1, 0), (1, 1), (2, 1), (2, 2), (0, 2)], dtype=float)
        return _resample_polygon(_unit_half_extent(v))
    raise ValueError(f"unknown category {category!r}")


def rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def reference_contour(category, spec: SceneSpec | None = None):
    """256-point contour scaled and rotated per ``spec``, centred at the origin by arc-length centroid."""
    scale = spec.scale if spec else 1.0
    aspect = spec.aspect if spec else 1.0
    angle = spec.angle if spec else 0.0
    pts = unit_contour(category, aspect, scale) * scale
    pts = pts @ rotation(angle).T
    return pts - contour_center(pts)


# ---------------------------------------------------------------- rendering


def coverage(contour, size=64, supersample=4):
    """Anti-aliased area coverage ``[size, size]`` of a polygon centred on the canvas."""
    s = supersample
    pts = np.asarray(contour) + size / 2.0
    n = size * s
    inside = np.zeros((n, n), dtype=bool)
    # only sub-samples inside the bounding box can be covered
    lo = np.clip(np.floor(pts.min(axis=0) * s - 0.5).astype(int), 0, n)
    hi = np.clip(np.ceil(pts.max(axis=0) * s + 0.5).astype(int), 0, n)
    if (hi > lo).all():
        cx = (np.arange(lo[0], hi[0]) + 0.5) / s
        cy = (np.arange(lo[1], hi[1]) + 0.5) / s
        gx, gy = np.meshgrid(cx, cy)
        hit = MplPath(pts).contains_points(np.stack([gx.ravel(), gy.ravel()], axis=1))
        inside[lo[1]:hi[1], lo[0]:hi[0]] = hit.reshape(gx.shape)
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def render_reference(spec: SceneSpec, cfg: GeneratorConfig | None = None):
    """Ground-truth float image ``[3, H, W]`` in [0, 1] (not differentiable)."""
    cfg = cfg or GeneratorConfig()
    cov = coverage(reference_contour(spec.category, spec), cfg.image_size, cfg.supersample)
    fg = np.asarray(spec.obj_rgb, dtype=np.float64)[:, None, None]
    bg = np.asarray(spec.bg_rgb, dtype=np.float64)[:, None, None]
    return cov[None] * fg + (1 - cov[None]) * bg


def reference_mask(spec: SceneSpec, cfg: GeneratorConfig | None = None):
    cfg = cfg or GeneratorConfig()
    return coverage(reference_contour(spec.category, spec), cfg.image_size, cfg.supersample) >= 0.5


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- sampling


def example_rng(master_seed, idx, stream=0):
    return np.random.default_rng([master_seed, idx, stream])


def sample_scene_spec(rng, cfg: GeneratorConfig | None = None, idx=0, seed=0) -> SceneSpec:
    cfg = cfg or GeneratorConfig()
    category = cfg.categories[rng.integers(len(cfg.categories))]
    angle = rng.uniform(0, 2 * np.pi)
    scale = rng.uniform(*cfg.scale_range)
    aspect = rng.uniform(*cfg.aspect_range)
    while True:
        obj = rng.uniform(0, 1, 3)
        bg = rng.uniform(0, 1, 3)
        if np.abs(obj - bg).max() >= cfg.min_contrast:
            break
    return SceneSpec(str(category), float(scale), float(angle), float(aspect),
                     [float(v) for v in obj], [float(v) for v in bg], int(idx), int(seed))


def add_noise(image, sigma, rng):
    """Additive Gaussian noise (std ``sigma``) clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)


# ---------------------------------------------------------------- storage


def split_specs(cfg: DatasetConfig):
    """SceneSpecs per split; example ``i`` depends only on (seed, i)."""
    sizes = cfg.split_sizes()
    out, start = {}, 0
    for split in SPLITS:
        out[split] = [sample_scene_spec(example_rng(cfg.seed, i), cfg.generator, i, cfg.seed)
                      for i in range(start, start + sizes[split])]
        start += sizes[split]
    if cfg.oos:
        out["oos"] = [
            SceneSpec(**{**asdict(s), "category": OOS_CATEGORIES[k % len(OOS_CATEGORIES)]})
            for k, s in enumerate(out["test"])
        ]
    return out


def subset_indices(n_train, fraction, seed):
    k = int(round(n_train * fraction))
    rng = np.random.default_rng([seed, int(round(fraction * 1e6)), 7])
    return sorted(int(i) for i in rng.choice(n_train, size=k, replace=False))


def _config_snapshot(cfg: DatasetConfig):
    d = asdict(cfg)
    d["generator"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["generator"].items()}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def build_dataset(cfg: DatasetConfig, out_dir, workers=1):
    """Write ``manifest.json``, ``images/{split}/{id}.png`` and ``labels/{split}.jsonl``."""
    if cfg.n < 3:
        raise ValueError("dataset needs at least 3 examples")
    out = Path(out_dir)
    specs = split_specs(cfg)
    jobs = []
    for split, items in specs.items():
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        with open(out / "labels" / f"{split}.jsonl", "w", encoding="utf-8") as fh:
            for s in items:
                fh.write(s.to_json() + "\n")
        jobs += [(s, out / "images" / split / f"{s.id}.png") for s in items]

    def write(job):
        s, path = job
        img = to_uint8(render_reference(s, cfg.generator)).transpose(1, 2, 0)
        Image.fromarray(img, "RGB").save(path, format="PNG")

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(write, jobs))
    else:
        for job in jobs:
            write(job)

    n_train = len(specs["train"])
    manifest = {
        "version": FORMAT_VERSION,
        "seed": cfg.seed,
        "counts": {k: len(v) for k, v in specs.items()},
        "config": _config_snapshot(cfg),
        "splits": {k: [s.id for s in v] for k, v in specs.items()},
        "subsets": {str(f): subset_indices(n_train, f, cfg.seed) for f in cfg.subset_fractions},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


class Dataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        mf = self.root / "manifest.json"
        if not mf.exists():
            raise FileNotFoundError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(mf.read_text(encoding="utf-8"))
        if self.manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {self.manifest.get('version')}")
        self._cache = {}

    @property
    def generator_config(self):
        g = dict(self.manifest["config"]["generator"])
        return GeneratorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in g.items()})

    def labels(self, split):
        path = self.root / "labels" / f"{split}.jsonl"
        with open(path, encoding="utf-8") as fh:
            return [SceneSpec.from_dict(json.loads(line)) for line in fh if line.strip()]

    def images(self, split):
        """All images of a split as a uint8 array ``[n, 3, H, W]`` (cached)."""
        if split not in self._cache:
            ids = self.manifest["splits"][split]
            arr = [np.asarray(Image.open(self.root / "images" / split / f"{i}.png").convert("RGB")) for i in ids]
            self._cache[split] = np.stack(arr).transpose(0, 3, 1, 2).copy()
        return self._cache[split]

    def train_indices(self, fraction=1.0):
        n = self.manifest["counts"]["train"]
        if fraction == 1.0:
            return list(range(n))
        key = str(fraction)
        if key in self.manifest["subsets"]:
            return list(self.manifest["subsets"][key])
        return subset_indices(n, fraction, self.manifest["seed"])


def to_float(images_u8):
    return images_u8.astype(np.float32) / 255.0
