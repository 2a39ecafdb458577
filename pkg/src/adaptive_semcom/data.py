"""Image dataset in the CIFAR-10 binary layout.

Each record is 3073 bytes: one label byte followed by 1024 red, 1024 green
and 1024 blue pixel bytes of a 32x32 image. The training split lives in
``data_batch_1.bin`` .. ``data_batch_5.bin`` and the test split in
``test_batch.bin``.

When the public archive is not at hand, :func:`write_synthetic_dataset`
produces procedural images in the same layout so that every downstream
component runs unchanged.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD = 3073
SIDE = 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
SPLIT_SIZES = {"train": 50_000, "test": 10_000}


class DatasetError(RuntimeError):
    pass


@dataclass
class ImageBatch:
    pixels: np.ndarray   # (B, 3, H, W) float32 in [0, 1]
    ids: np.ndarray      # (B,) int64, position within the split

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W pixels, got {self.pixels.shape}")
        if len(self.ids) != len(self.pixels) or len(self.ids) < 1:
            raise ValueError("ids must match a non-empty batch")

    def __len__(self):
        return len(self.ids)


def default_root() -> Path:
    env = os.environ.get("ADAPTIVE_SEMCOM_DATA")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "adaptive_semcom" / "cifar-synthetic"


def _split_files(split: str):
    if split == "train":
        return TRAIN_FILES
    if split == "test":
        return TEST_FILES
    raise ValueError(f"unknown split {split!r}")


def read_split(root, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels (N,) of a split."""
    root = Path(root)
    images, labels = [], []
    for name in _split_files(split):
        path = root / name
        if not path.is_file():
            raise DatasetError(f"missing dataset file: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size == 0 or raw.size % RECORD:
            raise DatasetError(f"corrupt dataset file (size {raw.size} not a multiple of {RECORD}): {path}")
        rec = raw.reshape(-1, RECORD)
        if rec[:, 0].max() > 9:
            raise DatasetError(f"corrupt dataset file (label byte out of range): {path}")
        labels.append(rec[:, 0])
        images.append(rec[:, 1:].reshape(-1, 3, SIDE, SIDE))
    return np.concatenate(images), np.concatenate(labels)


def normalize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / 255.0


class Dataset:
    """A loaded split, optionally restricted to its first ``limit`` images."""

    def __init__(self, root, split: str, limit: int | None = None):
        raw, labels = read_split(root, split)
        if limit is not None:
            raw, labels = raw[:limit], labels[:limit]
        self.split = split
        self.raw = raw
        self.labels = labels
        self.raw.setflags(write=False)

    def __len__(self):
        return len(self.raw)

    def batch(self, ids) -> ImageBatch:
        ids = np.asarray(ids, dtype=np.int64)
        return ImageBatch(normalize(self.raw[ids]), ids)

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0):
        """One epoch of batches. Shuffled when ``seed`` is given; the order
        depends only on (seed, epoch). The last partial batch is kept."""
        if batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        n = len(self)
        if seed is None:
            order = np.arange(n)
        else:
            order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, batch_size):
            yield self.batch(order[start:start + batch_size])


def load_dataset(root, split: str, batch_size: int = 1000):
    """Stream the split in file order."""
    yield from Dataset(root, split).batches(batch_size)


def batch_iterator(root, split: str, batch_size: int, seed: int, epoch: int = 0, limit: int | None = None):
    return list(Dataset(root, split, limit).batches(batch_size, seed, epoch))


# -- procedural stand-in ------------------------------------------------------

def synthetic_images(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Smooth two-colour gradients with a few overlaid discs and boxes and a
    little texture. Label = number of shapes plus 3 * (texture type)."""
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float32) / (SIDE - 1)
    c0 = rng.uniform(0, 1, (n, 3, 1, 1)).astype(np.float32)
    c1 = rng.uniform(0, 1, (n, 3, 1, 1)).astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi, (n, 1, 1, 1)).astype(np.float32)
    t = np.clip(0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)), 0, 1)
    img = c0 * (1 - t) + c1 * t

    shapes = rng.integers(0, 3, n)
    for s in range(3):
        on = shapes > s
        cx, cy = rng.uniform(0.15, 0.85, (2, n, 1, 1)).astype(np.float32)
        r = rng.uniform(0.08, 0.3, (n, 1, 1)).astype(np.float32)
        disc = rng.random(n) < 0.5
        inside = np.where(disc[:, None, None],
                          (xx - cx) ** 2 + (yy - cy) ** 2 < r ** 2,
                          (np.abs(xx - cx) < r) & (np.abs(yy - cy) < r * 0.7))
        inside &= on[:, None, None]
        colour = rng.uniform(0, 1, (n, 3, 1, 1)).astype(np.float32)
        img = np.where(inside[:, None], colour, img)

    texture = rng.integers(0, 3, n)
    freq = rng.uniform(4, 12, (n, 1, 1, 1)).astype(np.float32)
    stripes = 0.06 * np.sin(2 * np.pi * freq * (xx + yy))
    grain = 0.03 * rng.standard_normal((n, 1, SIDE, SIDE)).astype(np.float32)
    img = img + np.where((texture == 1)[:, None, None, None], stripes, 0)
    img = img + np.where((texture == 2)[:, None, None, None], grain, 0)

    raw = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    return raw, (shapes + 3 * texture).astype(np.uint8)


def write_split_files(root, split: str, raw: np.ndarray, labels: np.ndarray):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = _split_files(split)
    for name, part in zip(files, np.array_split(np.arange(len(raw)), len(files))):
        rec = np.empty((len(part), RECORD), dtype=np.uint8)
        rec[:, 0] = labels[part]
        rec[:, 1:] = raw[part].reshape(len(part), -1)
        rec.tofile(root / name)


def write_synthetic_dataset(root, n_train: int = SPLIT_SIZES["train"], n_test: int = SPLIT_SIZES["test"],
                            seed: int = 2024, chunk: int = 5000) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        parts = [synthetic_images(min(chunk, n - i), rng) for i in range(0, n, chunk)]
        write_split_files(root, split, np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return root


def ensure_dataset(root=None) -> Path:
    """Return a dataset root, writing the synthetic stand-in if it is absent."""
    root = Path(root) if root is not None else default_root()
    if not all((root / f).is_file() for f in TRAIN_FILES + TEST_FILES):
        write_synthetic_dataset(root)
    return root
