"""CIFAR-10 binary ingestion, seeded splits and a synthetic stand-in dataset."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    n_classes: int
    split_tag: str = "train"

    def __post_init__(self):
        images = np.asarray(self.images)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.dtype != np.uint8 or images.ndim != 4:
            raise ValueError("images must be a uint8 array of shape (N, H, W, C)")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"unknown split tag {self.split_tag!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split_tag: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, split_tag or self.split_tag)


@dataclass(frozen=True)
class SplitSpec:
    train_size: int
    val_size: int
    test_size: int = 0
    seed: int = 0


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 1 label byte + 1024 R + 1024 G + 1024 B bytes


def parse_cifar_records(blob: bytes, max_label: int = 9) -> tuple[np.ndarray, np.ndarray]:
    if len(blob) % CIFAR_RECORD:
        raise ValueError("malformed CIFAR record")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > max_label:
        raise ValueError("invalid label")
    images = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1).copy()
    return images, labels


def load_cifar_binary(paths: Iterable[str | os.PathLike], split_tag: str = "train") -> Dataset:
    """Read one or more ``data_batch_*.bin`` / ``test_batch.bin`` files."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        if not os.path.exists(path):
            raise FileNotFoundError(f"dataset not found: {path}")
        with open(path, "rb") as fh:
            x, y = parse_cifar_records(fh.read())
        images.append(x)
        labels.append(y)
    if not images:
        raise ValueError("no CIFAR files given")
    return Dataset(np.concatenate(images), np.concatenate(labels), 10, split_tag)


def dumps_cifar(d: Dataset) -> bytes:
    if d.images.shape[1:] != (CIFAR_SIDE, CIFAR_SIDE, 3):
        raise ValueError("CIFAR records hold 32x32x3 images")
    planes = d.images.transpose(0, 3, 1, 2).reshape(len(d), 3 * CIFAR_SIDE * CIFAR_SIDE)
    return np.concatenate([d.labels.astype(np.uint8)[:, None], planes], axis=1).tobytes()


def write_cifar_binary(d: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_cifar(d))


# ---------------------------------------------------------------------------


def split(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``train_size`` for training and the next ``val_size`` for validation."""
    if spec.train_size < 0 or spec.val_size < 0:
        raise ValueError("split sizes must be non-negative")
    if spec.train_size + spec.val_size > len(d):
        raise ValueError(
            f"split of {spec.train_size}+{spec.val_size} oversubscribes a dataset of {len(d)}"
        )
    order = np.random.default_rng(spec.seed).permutation(len(d))
    train = d.subset(order[: spec.train_size], "train")
    val = d.subset(order[spec.train_size: spec.train_size + spec.val_size], "val")
    return train, val


def subsample(d: Dataset, n: int, classes: Optional[int] = None, seed: int = 0) -> Dataset:
    """Keep ``classes`` randomly chosen classes (relabelled 0..classes-1), then ``n`` random images."""
    rng = np.random.default_rng(seed)
    labels = d.labels
    n_classes = d.n_classes
    keep = np.arange(len(d))
    if classes is not None:
        if classes > d.n_classes:
            raise ValueError("more classes requested than available")
        chosen = np.sort(rng.choice(d.n_classes, size=classes, replace=False))
        keep = np.flatnonzero(np.isin(labels, chosen))
        remap = np.full(d.n_classes, -1)
        remap[chosen] = np.arange(classes)
        labels = remap[labels]
        n_classes = classes
    if n > len(keep):
        raise ValueError(f"cannot subsample {n} images from {len(keep)}")
    pick = np.sort(rng.choice(keep, size=n, replace=False))
    return Dataset(d.images[pick], labels[pick], n_classes, d.split_tag)


# ---------------------------------------------------------------------------
# synthetic data

_WARM = np.array([210.0, 110.0, 50.0])
_COOL = np.array([50.0, 120.0, 210.0])
_N_ORIENT = 5
_PERIOD = 6.0


def synth_dataset(
    n: int,
    n_classes: int = 10,
    size: int = 16,
    seed: int = 0,
    split_tag: str = "train",
    noise: float = 20.0,
    phase_jitter: float = 1.5,
) -> Dataset:
    """Oriented colour gratings with nuisance variation.

    Class ``c`` fixes the grating tilt away from horizontal (``c % 5`` of
    0, 22.5, 45, 67.5 and 90 degrees, mirrored to either side at random so
    that horizontal flips keep the label) and, for ``c >= 5``, switches the
    bar colour from warm to cool.  Each image draws its own phase shift,
    tilt jitter, background level, brightness and pixel noise, so the class
    is recoverable while translations and mild photometric changes are
    label-preserving.  Large rotations and shears, inversion, solarization
    and desaturation are not.  Labels are assigned round-robin before
    shuffling, which keeps classes balanced to within one image.
    """
    if not 1 <= n_classes <= 10:
        raise ValueError("n_classes must be in [1, 10]")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % n_classes)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    ys -= (size - 1) / 2.0
    xs -= (size - 1) / 2.0

    tilt = (labels % _N_ORIENT) * 90.0 / (_N_ORIENT - 1) + rng.uniform(-5.0, 5.0, n)
    angle = np.deg2rad(tilt * rng.choice([-1.0, 1.0], n))
    phase = rng.uniform(-phase_jitter, phase_jitter, n)
    bg = rng.uniform(70.0, 130.0, n)
    gain = rng.uniform(0.75, 1.25, n)
    tint = rng.normal(0.0, 12.0, (n, 3))

    proj = xs[None] * np.cos(angle)[:, None, None] + ys[None] * np.sin(angle)[:, None, None]
    bar = 0.5 + 0.5 * np.cos(2.0 * np.pi * (proj + phase[:, None, None]) / _PERIOD)
    colour = np.where((labels >= _N_ORIENT)[:, None], _COOL, _WARM) + tint
    img = bg[:, None, None, None] + bar[..., None] * (colour[:, None, None, :] - bg[:, None, None, None])
    img = img * gain[:, None, None, None] + rng.normal(0.0, noise, img.shape)
    images = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Dataset(images, labels, n_classes, split_tag)


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a pixel-space nearest-centroid classifier (separability check)."""
    xtr = train.images.reshape(len(train), -1).astype(np.float64)
    xte = test.images.reshape(len(test), -1).astype(np.float64)
    cents = np.stack([xtr[train.labels == c].mean(axis=0) for c in range(train.n_classes)])
    d2 = ((xte[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(d2.argmin(axis=1) == test.labels))
