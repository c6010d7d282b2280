"""Datasets: the bundled synthetic shapes corpus and directory-per-class folders."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import IMAGE_SUFFIXES, read_image, write_image

SHAPES = (
    "disk",
    "square",
    "triangle",
    "plus",
    "ring",
    "x_cross",
    "diamond",
    "frame",
    "h_bar",
    "v_bar",
)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) in [0, 1]
    labels: np.ndarray  # (N,) int
    num_classes: int
    class_names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def one_hot(self, idx=None) -> np.ndarray:
        labels = self.labels if idx is None else self.labels[idx]
        return np.eye(self.num_classes)[labels]

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.class_names)


def _shape_mask(kind: str, yy, xx, r: float, rot: float) -> np.ndarray:
    c, s = np.cos(rot), np.sin(rot)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    rad = np.hypot(u, v)
    w = 0.32 * r
    if kind == "disk":
        return rad < r
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.85 * r
    if kind == "triangle":
        return (v < 0.6 * r) & (v > -r + 1.7 * np.abs(u))
    if kind == "plus":
        return ((np.abs(u) < w) & (np.abs(v) < r)) | ((np.abs(v) < w) & (np.abs(u) < r))
    if kind == "ring":
        return (rad < r) & (rad > 0.55 * r)
    if kind == "x_cross":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((np.abs(a) < w) & (np.abs(b) < r)) | ((np.abs(b) < w) & (np.abs(a) < r))
    if kind == "diamond":
        return np.abs(u) + np.abs(v) < 1.1 * r
    if kind == "frame":
        m = np.maximum(np.abs(u), np.abs(v))
        return (m < 0.9 * r) & (m > 0.5 * r)
    if kind == "h_bar":
        return (np.abs(xx) < r) & (np.abs(yy) < 0.35 * r)
    if kind == "v_bar":
        return (np.abs(yy) < r) & (np.abs(xx) < 0.35 * r)
    raise ValueError(kind)


def _background(rng, size: int) -> np.ndarray:
    # low-frequency colored noise plus a faint high-frequency grain
    coarse = rng.uniform(0, 1, (3, 5, 5))
    idx = np.linspace(0, 4, size)
    i0 = np.floor(idx).astype(int).clip(0, 3)
    f = idx - i0
    rows = coarse[:, i0, :] * (1 - f)[None, :, None] + coarse[:, i0 + 1, :] * f[None, :, None]
    bg = rows[:, :, i0] * (1 - f)[None, None, :] + rows[:, :, i0 + 1] * f[None, None, :]
    bg = 0.25 + 0.5 * bg
    return np.clip(bg + rng.normal(0, 0.04, (3, size, size)), 0, 1)


def synthetic_shapes(n: int, seed: int = 0, size: int = 32) -> Dataset:
    """Colored geometric shapes on textured backgrounds, balanced over 10 classes.

    Each image draws its own shape size, position, rotation (shapes that are
    not rotation-invariant classes keep small angles so classes stay
    distinct), color and background.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(SHAPES)
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size))
    grid = np.arange(size) - (size - 1) / 2
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    for i, lab in enumerate(labels):
        kind = SHAPES[lab]
        r = rng.uniform(0.22, 0.36) * size
        cy, cx = rng.uniform(-0.12, 0.12, 2) * size
        rot = rng.uniform(-0.25, 0.25)
        mask = _shape_mask(kind, yy - cy, xx - cx, r, rot)
        bg = _background(rng, size)
        color = rng.uniform(0, 1, 3)
        # push the shape color away from the local background mean for contrast
        mean_bg = bg.mean(axis=(1, 2))
        color = np.where(np.abs(color - mean_bg) < 0.3, np.where(mean_bg > 0.5, color * 0.3, 0.7 + 0.3 * color), color)
        img = np.where(mask[None], color[:, None, None], bg)
        images[i] = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    return Dataset(images, labels.astype(int), len(SHAPES), SHAPES)


def synthetic_corpus(n_train: int = 5000, n_test: int = 1000, seed: int = 0, size: int = 32):
    """Disjoint train/test splits (independent seeds)."""
    ss = np.random.SeedSequence(seed).spawn(2)
    return synthetic_shapes(n_train, ss[0], size), synthetic_shapes(n_test, ss[1], size)


def load_image_folder(root, size: int | None = None) -> Dataset:
    """Read ``root/<class_name>/*.png``; classes are the sorted subdirectory names."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class subdirectories in {root}")
    images, labels = [], []
    for c, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = read_image(f, "RGB")
            if size is not None and img.shape[1:] != (size, size):
                raise ValueError(f"{f}: expected {size}x{size}, got {img.shape[1:]}")
            images.append(img)
            labels.append(c)
    if not images:
        raise ValueError(f"no images found under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{root}: images have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels), len(classes), tuple(classes))


def save_image_folder(ds: Dataset, root) -> None:
    root = Path(root)
    names = ds.class_names or tuple(str(i) for i in range(ds.num_classes))
    for name in names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(zip(ds.images, ds.labels)):
        write_image(root / names[lab] / f"{i:05d}.png", img)


def load_overlay_pool(directory) -> list[np.ndarray]:
    """Grayscale overlays (textures or noise) from a directory of images.

    ``.npy`` files next to a PNG of the same stem take precedence (exact
    noise values).
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"overlay directory not found: {directory}")
    pool = []
    for f in sorted(directory.iterdir()):
        if f.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        npy = f.with_suffix(".npy")
        pool.append(np.clip(np.load(npy), 0, 1) if npy.exists() else read_image(f, "L"))
    return pool
