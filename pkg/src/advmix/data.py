"""Datasets, mix-ratio sampling and batch iteration."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .config import DatasetSpec

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class LabeledImage:
    pixels: np.ndarray  # C x H x W in [0, 1]
    label: int


@dataclass
class MixBatch:
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray  # N x num_classes, one-hot
    ratios: np.ndarray  # N, on the simplex

    def __post_init__(self):
        if self.ratios.ndim != 1 or len(self.ratios) != len(self.images):
            raise ValueError("need one ratio per image")
        if np.any(self.ratios < 0) or abs(self.ratios.sum() - 1.0) > 1e-9:
            raise ValueError("ratios must lie on the probability simplex")


@dataclass
class Batch:
    """One plain batch plus the grouping of its members into mix sets."""

    images: np.ndarray  # b x C x H x W
    labels: np.ndarray  # b, integer class ids
    index: np.ndarray  # b, dataset indices of the members
    groups: np.ndarray  # K x N, positions into this batch
    ratios: np.ndarray  # K x N

    @property
    def n_sets(self) -> int:
        return len(self.groups)

    def mix_batches(self, num_classes: int) -> list[MixBatch]:
        eye = np.eye(num_classes)
        return [
            MixBatch(self.images[g], eye[self.labels[g]], r)
            for g, r in zip(self.groups, self.ratios)
        ]


def stack(images: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    if not images:
        return np.zeros((0, 3, 32, 32)), np.zeros(0, dtype=np.int64)
    return (
        np.stack([im.pixels for im in images]),
        np.array([im.label for im in images], dtype=np.int64),
    )


# --------------------------------------------------------------------- CIFAR


def load_cifar_binary(path, num_classes: int = 100, coarse: bool | None = None) -> list[LabeledImage]:
    """Read CIFAR binary records (``[coarse byte] label byte + 3072 pixels``).

    ``coarse=None`` picks the CIFAR-100 layout when ``num_classes > 10``.
    """
    if coarse is None:
        coarse = num_classes > 10
    header = 2 if coarse else 1
    record = header + CIFAR_PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        good = raw.size - raw.size % record
        raise ValueError(f"{path}: truncated record at byte offset {good}")
    recs = raw.reshape(-1, record)
    labels = recs[:, header - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        off = int(bad[0]) * record + header - 1
        raise ValueError(f"{path}: label {labels[bad[0]]} out of range at byte offset {off}")
    pixels = recs[:, header:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return [LabeledImage(p, int(l)) for p, l in zip(pixels, labels)]


def save_cifar_binary(path, images: list[LabeledImage], coarse_labels=None) -> None:
    """Write records in the layout read by :func:`load_cifar_binary`."""
    rows = []
    for i, im in enumerate(images):
        head = [im.label] if coarse_labels is None else [coarse_labels[i], im.label]
        px = np.round(np.asarray(im.pixels) * 255.0).astype(np.uint8).reshape(-1)
        rows.append(np.concatenate([np.array(head, dtype=np.uint8), px]))
    blob = np.concatenate(rows) if rows else np.zeros(0, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(blob.tobytes())


# ----------------------------------------------------------------- synthetic


def _prototypes(num_classes: int, channels: int, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    protos = np.empty((num_classes, channels, size, size))
    for k in range(num_classes):
        angle = np.pi * k / num_classes
        freq = 2.0 + (k % 3)
        wave = 0.5 + 0.4 * np.cos(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
        blob_c = rng.uniform(0.25, 0.75, size=2)
        blob = np.exp(-((xx - blob_c[0]) ** 2 + (yy - blob_c[1]) ** 2) / 0.02)
        tint = rng.uniform(0.3, 1.0, size=channels)
        for c in range(channels):
            protos[k, c] = np.clip(tint[c] * wave * (1 - 0.5 * blob) + 0.5 * blob * (c == k % channels), 0, 1)
    return protos


def make_synthetic(spec: DatasetSpec) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Class-conditional oriented-stripe images with additive Gaussian noise.

    Returns ``((x_train, y_train), (x_test, y_test))``; fully determined by
    ``spec.seed``. With ``noise == 0`` every image equals its class prototype.
    """
    if spec.num_classes < 2:
        raise ValueError("synthetic data needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    protos = _prototypes(spec.num_classes, spec.channels, spec.image_size, rng)

    def split(n):
        labels = rng.permutation(np.arange(n) % spec.num_classes)
        noise = rng.normal(0.0, 1.0, size=(n,) + protos.shape[1:])
        return np.clip(protos[labels] + spec.noise * noise, 0.0, 1.0), labels.astype(np.int64)

    return split(spec.n_train), split(spec.n_test)


def load_dataset(spec: DatasetSpec):
    """Materialize ``spec`` as ``((x_train, y_train), (x_test, y_test))``."""
    spec.validate()
    if spec.source == "synthetic":
        return make_synthetic(spec)
    train_path = spec.path
    test_path = None
    if os.path.isdir(spec.path):
        names = sorted(os.listdir(spec.path))
        train_path = os.path.join(spec.path, "train.bin" if "train.bin" in names else "data_batch_1.bin")
        test_path = os.path.join(spec.path, "test.bin" if "test.bin" in names else "test_batch.bin")
    train = stack(load_cifar_binary(train_path, spec.num_classes))
    test = stack(load_cifar_binary(test_path, spec.num_classes)) if test_path else train
    return (
        (train[0][: spec.n_train], train[1][: spec.n_train]),
        (test[0][: spec.n_test], test[1][: spec.n_test]),
    )


# --------------------------------------------------------------- mix ratios


def sample_mix_ratios(n: int, concentration: float, rng: np.random.Generator) -> np.ndarray:
    """One draw from the symmetric Dirichlet(concentration) over ``n`` entries."""
    if n < 1:
        raise ValueError("need at least one image")
    if not concentration > 0:
        raise ValueError(f"concentration must be positive, got {concentration}")
    if n == 1:
        return np.ones(1)
    g = rng.gamma(concentration, 1.0, size=n)
    total = g.sum()
    if total <= 0 or not np.isfinite(total):
        g = np.zeros(n)
        g[rng.integers(n)] = 1.0
        total = 1.0
    return g / total


# ---------------------------------------------------------------- iteration


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool, crop: bool, padding: int = 4) -> np.ndarray:
    out = images.copy()
    if flip:
        which = rng.random(len(out)) < 0.5
        out[which] = out[which][..., ::-1]
    if crop and padding > 0:
        p = padding
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        H, W = out.shape[-2:]
        offs = rng.integers(0, 2 * p + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy : dy + H, dx : dx + W]
    return out


def batch_iterator(
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    n_per_set: int,
    concentration: float,
    *,
    seed: int = 0,
    epoch: int = 0,
    flip: bool = False,
    crop: bool = False,
    padding: int = 4,
    sets_per_batch: int | None = None,
) -> Iterator[Batch]:
    """One epoch of shuffled batches, each grouped into disjoint mix sets.

    The stream depends only on ``(seed, epoch)``. A trailing short batch is
    kept so every example appears exactly once per epoch.
    """
    if batch_size < n_per_set:
        raise ValueError(f"batch size {batch_size} smaller than set size {n_per_set}")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(images))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x = images[idx]
        if flip or crop:
            x = augment(x, rng, flip, crop, padding)
        k = len(idx) // n_per_set
        if sets_per_batch is not None:
            k = min(k, sets_per_batch)
        groups = np.arange(k * n_per_set).reshape(k, n_per_set)
        ratios = np.stack([sample_mix_ratios(n_per_set, concentration, rng) for _ in range(k)]) if k else np.zeros((0, n_per_set))
        yield Batch(x, labels[idx], idx, groups, ratios)
