"""Deterministic dataset provisioning.

Two sources: a synthetic class-template generator (each class is a fixed
random template; samples are the template plus Gaussian noise and a small
circular shift) and a loader for the CIFAR-100 binary layout (3074-byte
records: coarse label, fine label, 3*32*32 channel-planar pixels).

All randomness comes from PCG64 streams derived from the caller's seed (see
``seeding``), so generated sets are bit-identical across platforms. The
template stream depends only on the seed, which keeps train and test splits
of the same seed centered on the same class templates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataFormatError
from .seeding import split_stream, substream

RECORD_BYTES = 3074  # 1 coarse + 1 fine + 3072 pixels
CIFAR_COUNTS = {"train": 50000, "test": 10000}


@dataclass
class LabeledImageSet:
    """Images as (N,C,H,W) float64 in [0,1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str] | None = None
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError(
                f"images/labels length mismatch: {len(self.images)} vs {len(self.labels)}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)


def synth_templates(num_classes: int, image_size: int, seed: int,
                    channels: int = 3) -> np.ndarray:
    """The fixed per-class template images, (num_classes, C, H, W).

    Templates are blockwise-constant random patterns (4px grain where the
    size allows) so that pixel shifts of a few pixels stay close to the
    original template, as they would for natural images.
    """
    grain = max(g for g in (1, 2, 4) if image_size % g == 0)
    rng = substream(seed, "templates")
    coarse = rng.uniform(0.0, 1.0, (num_classes, channels, image_size // grain, image_size // grain))
    return np.kron(coarse, np.ones((1, 1, grain, grain)))


def synth_generate(num_classes: int, per_class: int, image_size: int, seed: int,
                   split: str = "train", noise_sigma: float = 0.15,
                   max_shift: int = 2, channels: int = 3) -> LabeledImageSet:
    """Seeded synthetic set: template + N(0, sigma) noise + shift <= max_shift px.

    Per class the draw order is fixed (shifts, then noise), and the train and
    test splits use distinct sample streams over shared templates, so the
    whole set is a pure function of (seed, split).
    """
    if num_classes <= 0 or per_class < 0:
        raise ContractError("num_classes and per_class must be positive")
    templates = synth_templates(num_classes, image_size, seed, channels)
    rng = split_stream(seed, "samples", {"train": 0, "test": 1}[split])
    images = np.empty((num_classes * per_class, channels, image_size, image_size))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        shifts = rng.integers(-max_shift, max_shift + 1, (per_class, 2)) if max_shift > 0 \
            else np.zeros((per_class, 2), dtype=np.int64)
        noise = rng.standard_normal((per_class, channels, image_size, image_size)) * noise_sigma
        for i in range(per_class):
            img = np.roll(templates[c], (int(shifts[i, 0]), int(shifts[i, 1])), axis=(1, 2))
            images[c * per_class + i] = np.clip(img + noise[i], 0.0, 1.0)
        labels[c * per_class: (c + 1) * per_class] = c
    return LabeledImageSet(images=images, labels=labels)


def cifar100_load(path: str, split: str) -> LabeledImageSet:
    """Parse a CIFAR-100 binary file; fine labels become the class labels."""
    if split not in CIFAR_COUNTS:
        raise DataFormatError(f"unknown split {split!r}; expected train or test")
    if not os.path.exists(path):
        raise DataFormatError(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: truncated record at byte offset {raw.size - raw.size % RECORD_BYTES} "
            f"(file size {raw.size} not a multiple of {RECORD_BYTES})")
    count = raw.size // RECORD_BYTES
    if count != CIFAR_COUNTS[split]:
        raise DataFormatError(
            f"{path}: expected {CIFAR_COUNTS[split]} {split} records, found {count}")
    rec = raw.reshape(count, RECORD_BYTES)
    coarse = rec[:, 0].astype(np.int64)
    fine = rec[:, 1].astype(np.int64)
    pixels = rec[:, 2:].reshape(count, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImageSet(images=pixels, labels=fine, coarse_labels=coarse)


def cifar100_dump(dataset: LabeledImageSet, path: str) -> None:
    """Re-serialize to the CIFAR-100 binary layout (bit-exact round trip)."""
    imgs = dataset.images
    if imgs.shape[1:] != (3, 32, 32):
        raise DataFormatError(f"binary layout requires (3,32,32) images, got {imgs.shape[1:]}")
    if dataset.labels.max(initial=0) > 255:
        raise DataFormatError("labels exceed one byte")
    n = len(dataset)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    coarse = dataset.coarse_labels if dataset.coarse_labels is not None \
        else np.zeros(n, dtype=np.int64)
    rec[:, 0] = coarse.astype(np.uint8)
    rec[:, 1] = dataset.labels.astype(np.uint8)
    rec[:, 2:] = np.rint(imgs * 255.0).astype(np.uint8).reshape(n, 3072)
    rec.tofile(path)


def subset_classes(dataset: LabeledImageSet, class_ids, relabel: bool = False) -> LabeledImageSet:
    """Keep only the given classes; with relabel, map them to 0..k-1 in the given order."""
    ids = [int(c) for c in class_ids]
    present = set(int(c) for c in dataset.class_ids)
    unknown = [c for c in ids if c not in present]
    if unknown:
        raise ContractError(f"unknown class ids {unknown}")
    keep = np.isin(dataset.labels, ids)
    images = dataset.images[keep]
    labels = dataset.labels[keep]
    coarse = dataset.coarse_labels[keep] if dataset.coarse_labels is not None else None
    if relabel:
        mapping = {c: i for i, c in enumerate(ids)}
        labels = np.array([mapping[int(c)] for c in labels], dtype=np.int64)
    return LabeledImageSet(images=images.copy(), labels=labels.copy(),
                           class_names=dataset.class_names, coarse_labels=coarse)
