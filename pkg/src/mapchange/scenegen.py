"""Synthetic bitemporal scenes with a temporal-invariant historical map.

A scene is a K-class label raster made of rectangles and ellipses over a
background class. Changes reassign whole regions to other classes. Each epoch
is rendered from its labels with an independent radiometric perturbation
(per-channel gain and bias, pixel noise, sub-pixel shift), so unchanged ground
still looks different between T1 and T2.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

# land-cover-like colors; several pairs are close on purpose
BASE_PALETTE = np.array(
    [
        [0.55, 0.47, 0.36],  # bare soil / background
        [0.63, 0.60, 0.57],  # building
        [0.30, 0.50, 0.25],  # vegetation
        [0.20, 0.30, 0.45],  # water
        [0.43, 0.43, 0.45],  # road
        [0.62, 0.63, 0.36],  # farmland
        [0.18, 0.36, 0.20],  # forest
        [0.72, 0.55, 0.45],  # roof tiles
        [0.50, 0.56, 0.60],  # greenhouse
    ]
)
TEXTURE_SCALE = np.array([0.6, 0.4, 1.0, 0.3, 0.5, 0.8, 1.2, 0.5, 0.4])


def class_palette(num_classes: int) -> np.ndarray:
    if num_classes <= len(BASE_PALETTE):
        return BASE_PALETTE[:num_classes].copy()
    extra = np.random.default_rng(num_classes).uniform(0.15, 0.85, (num_classes - len(BASE_PALETTE), 3))
    return np.vstack([BASE_PALETTE, extra])


def texture_scale(num_classes: int) -> np.ndarray:
    reps = -(-num_classes // len(TEXTURE_SCALE))
    return np.tile(TEXTURE_SCALE, reps)[:num_classes]


@dataclass
class GenConfig:
    num_classes: int = 5
    tile: int = 64
    n_train: int = 200
    n_val: int = 20
    n_test: int = 50
    seed: int = 0
    patch_count: tuple[int, int] = (4, 9)
    patch_size: tuple[int, int] = (8, 28)
    change_region_count: tuple[int, int] = (1, 3)
    change_region_size: tuple[int, int] = (8, 24)
    gain: tuple[float, float] = (0.85, 1.15)
    bias: tuple[float, float] = (-0.08, 0.08)
    noise_sigma: float = 0.03
    max_shift: float = 0.5
    texture: float = 0.04
    label_noise: float = 0.0

    def __post_init__(self):
        for name in ("patch_count", "patch_size", "change_region_count", "change_region_size", "gain", "bias"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: range ({lo}, {hi}) is not ordered")
            setattr(self, name, (type(lo)(lo), type(hi)(hi)))
        if self.num_classes < 2 or self.tile < 1:
            raise ValueError("num_classes must be >= 2 and tile positive")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label_noise must be a probability")
        if self.noise_sigma < 0 or self.max_shift < 0 or self.texture < 0:
            raise ValueError("noise_sigma, max_shift and texture must be non-negative")

    @property
    def splits(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


@dataclass
class Sample:
    id: str
    image_t1: np.ndarray  # (H, W, 3) float in [0, 1]
    image_t2: np.ndarray
    map_t1: np.ndarray  # historical map, (H, W) uint8
    gt_t1: np.ndarray
    gt_t2: np.ndarray
    change_mask: np.ndarray  # (H, W) uint8 in {0, 1}
    split: str = field(default="train")


def _shape_mask(rng: np.random.Generator, tile: int, size_range: tuple[int, int]) -> np.ndarray:
    h = int(rng.integers(size_range[0], size_range[1] + 1))
    w = int(rng.integers(size_range[0], size_range[1] + 1))
    cy = rng.uniform(0, tile)
    cx = rng.uniform(0, tile)
    yy, xx = np.mgrid[0:tile, 0:tile] + 0.5
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)
    return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0


def generate_scene(cfg: GenConfig, rng: np.random.Generator, patches: int | None = None) -> np.ndarray:
    """K-class (tile, tile) map: background class 0 overlaid with random patches."""
    labels = np.zeros((cfg.tile, cfg.tile), dtype=np.uint8)
    if patches is None:
        patches = int(rng.integers(cfg.patch_count[0], cfg.patch_count[1] + 1))
    for _ in range(patches):
        cls = int(rng.integers(1, cfg.num_classes))
        labels[_shape_mask(rng, cfg.tile, cfg.patch_size)] = cls
    return labels


def apply_changes(
    map_t1: np.ndarray, cfg: GenConfig, rng: np.random.Generator, regions: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Reassign random regions to other classes; returns (map_t2, change_mask)."""
    k = cfg.num_classes
    map_t2 = map_t1.copy()
    if regions is None:
        regions = int(rng.integers(cfg.change_region_count[0], cfg.change_region_count[1] + 1))
    for _ in range(regions):
        region = _shape_mask(rng, map_t1.shape[0], cfg.change_region_size)
        target = int(rng.integers(0, k))
        alternative = (target + int(rng.integers(1, k))) % k
        current = map_t1[region]
        # every pixel must end in a class different from its T1 class
        map_t2[region] = np.where(current == target, alternative, target)
    change = (map_t1 != map_t2).astype(np.uint8)
    return map_t2, change


def _bilinear_shift(img: np.ndarray, dy: float, dx: float) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def render_image(labels: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Render one epoch: palette + class texture, then gain/bias/noise/shift, clamped to [0, 1]."""
    h, w = labels.shape
    palette = class_palette(cfg.num_classes)
    img = palette[labels]
    if cfg.texture > 0:
        tex = rng.standard_normal((h, w)) * cfg.texture * texture_scale(cfg.num_classes)[labels]
        img = img + tex[..., None]
    gain = rng.uniform(cfg.gain[0], cfg.gain[1], 3)
    bias = rng.uniform(cfg.bias[0], cfg.bias[1], 3)
    img = img * gain + bias
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    if cfg.max_shift > 0:
        dy, dx = rng.uniform(-cfg.max_shift, cfg.max_shift, 2)
        img = _bilinear_shift(img, dy, dx)
    return np.clip(img, 0.0, 1.0)


def one_hot_encode(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(..., H, W) ids -> (..., K, H, W) float one-hot."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"class id {labels.max()} outside [0, {num_classes})")
    eye = np.eye(num_classes)
    return np.moveaxis(eye[labels.astype(np.int64)], -1, -3)


def sample_rng(seed: int, sample_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), stream])


def make_sample(cfg: GenConfig, sample_id: str, split: str = "train") -> Sample:
    gt_t1 = generate_scene(cfg, sample_rng(cfg.seed, sample_id, 0))
    gt_t2, change = apply_changes(gt_t1, cfg, sample_rng(cfg.seed, sample_id, 1))
    image_t1 = render_image(gt_t1, cfg, sample_rng(cfg.seed, sample_id, 2))
    image_t2 = render_image(gt_t2, cfg, sample_rng(cfg.seed, sample_id, 3))
    map_t1 = gt_t1.copy()
    if cfg.label_noise > 0:
        rng = sample_rng(cfg.seed, sample_id, 4)
        flip = rng.random(map_t1.shape) < cfg.label_noise
        map_t1[flip] = rng.integers(0, cfg.num_classes, int(flip.sum()))
    return Sample(sample_id, image_t1, image_t2, map_t1, gt_t1, gt_t2, change, split)


def sample_ids(cfg: GenConfig) -> list[tuple[str, str]]:
    return [(f"{split}_{i:04d}", split) for split, n in cfg.splits.items() for i in range(n)]


def generate_dataset(cfg: GenConfig, threads: int = 1) -> list[Sample]:
    """All splits, in (train, val, test) order. Output does not depend on ``threads``."""
    ids = sample_ids(cfg)
    if threads <= 1:
        return [make_sample(cfg, sid, split) for sid, split in ids]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(lambda item: make_sample(cfg, *item), ids))


@dataclass
class Dataset:
    """Stacked arrays of a list of samples, in network layout."""

    ids: list[str]
    image_t1: np.ndarray  # (N, 3, H, W)
    image_t2: np.ndarray
    map_t1: np.ndarray  # (N, H, W) int64
    gt_t1: np.ndarray
    gt_t2: np.ndarray
    change: np.ndarray  # (N, H, W) float

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Dataset":
        if not samples:
            raise ValueError("dataset is empty")

        def stack(attr, dtype):
            return np.stack([getattr(s, attr) for s in samples]).astype(dtype)

        return cls(
            ids=[s.id for s in samples],
            image_t1=stack("image_t1", np.float64).transpose(0, 3, 1, 2).copy(),
            image_t2=stack("image_t2", np.float64).transpose(0, 3, 1, 2).copy(),
            map_t1=stack("map_t1", np.int64),
            gt_t1=stack("gt_t1", np.int64),
            gt_t2=stack("gt_t2", np.int64),
            change=stack("change_mask", np.float64),
        )

    @property
    def num_classes_seen(self) -> int:
        return int(max(self.gt_t1.max(), self.gt_t2.max(), self.map_t1.max())) + 1
