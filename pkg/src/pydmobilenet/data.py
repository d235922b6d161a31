"""CIFAR-10/100 binary ingestion, augmentation and batching."""
from __future__ import annotations

import os
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import make_rng

IMAGE_SHAPE = (3, 32, 32)
PIXELS = 3 * 32 * 32
PAD = 4

CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
# directories the official archives unpack into
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
SPLIT_SIZES = {"train": 50_000, "test": 10_000}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "synthetic": 4}


class DatasetError(ValueError):
    pass


class LabeledImage(NamedTuple):
    pixels: np.ndarray  # uint8 (3, 32, 32), channel-major
    label: int


def record_size(dataset: str) -> int:
    return PIXELS + (1 if dataset == "cifar10" else 2)


def encode_record(img: LabeledImage, dataset: str = "cifar10", coarse_label: int = 0) -> bytes:
    pixels = np.asarray(img.pixels, dtype=np.uint8)
    if pixels.shape != IMAGE_SHAPE:
        raise DatasetError(f"pixels must have shape {IMAGE_SHAPE}, got {pixels.shape}")
    head = bytes([img.label]) if dataset == "cifar10" else bytes([coarse_label, img.label])
    return head + pixels.tobytes()


def parse_records(raw: bytes, dataset: str = "cifar10", source: str = "<bytes>"):
    """Decode a whole binary file into (pixels uint8 (n,3,32,32), labels int64 (n,))."""
    size = record_size(dataset)
    if len(raw) == 0 or len(raw) % size:
        raise DatasetError(f"{source}: {len(raw)} bytes is not a whole number of {size}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    labels = rec[:, size - PIXELS - 1].astype(np.int64)  # fine label for CIFAR-100
    pixels = rec[:, size - PIXELS:].reshape(-1, *IMAGE_SHAPE)
    if labels.max() >= NUM_CLASSES[dataset]:
        raise DatasetError(f"{source}: label {labels.max()} out of range for {dataset}")
    return pixels, labels


def parse_record(raw: bytes, dataset: str = "cifar10") -> LabeledImage:
    pixels, labels = parse_records(raw, dataset)
    if len(labels) != 1:
        raise DatasetError(f"expected one record, got {len(labels)}")
    return LabeledImage(pixels[0].copy(), int(labels[0]))


def _resolve_dir(root: Path, dataset: str) -> Path:
    sub = root / CIFAR_SUBDIRS[dataset]
    return sub if sub.is_dir() else root


def load_cifar(data_dir, dataset: str = "cifar10", split: str = "train",
               expect_count: bool = True):
    """Load one split as (pixels, labels).

    ``data_dir`` may point at the unpacked archive directory or its parent.
    """
    if (dataset, split) not in CIFAR_FILES:
        raise DatasetError(f"unknown dataset/split {dataset}/{split}")
    root = _resolve_dir(Path(data_dir), dataset)
    pixels, labels = [], []
    for name in CIFAR_FILES[(dataset, split)]:
        path = root / name
        if not path.is_file():
            raise DatasetError(f"missing CIFAR file {path}")
        p, l = parse_records(path.read_bytes(), dataset, str(path))
        pixels.append(p)
        labels.append(l)
    pixels = np.concatenate(pixels)
    labels = np.concatenate(labels)
    if expect_count and len(labels) != SPLIT_SIZES[split]:
        raise DatasetError(f"{dataset}/{split}: expected {SPLIT_SIZES[split]} records, found {len(labels)}")
    return pixels, labels


def default_data_dir(explicit=None):
    return explicit or os.environ.get("PYDNET_DATA_DIR")


def write_cifar_split(data_dir, pixels, labels, dataset: str = "cifar10", split: str = "train"):
    """Write arrays in the published binary layout (used for fixtures and round-trips)."""
    root = Path(data_dir)
    root.mkdir(parents=True, exist_ok=True)
    files = CIFAR_FILES[(dataset, split)]
    chunks = np.array_split(np.arange(len(labels)), len(files))
    head = 1 if dataset == "cifar10" else 2
    for name, idx in zip(files, chunks):
        rec = np.zeros((len(idx), head + PIXELS), dtype=np.uint8)
        rec[:, head - 1] = labels[idx]
        rec[:, head:] = pixels[idx].reshape(len(idx), -1)
        (root / name).write_bytes(rec.tobytes())


# -- normalization ---------------------------------------------------------

class Normalizer:
    """Per-channel ``(byte / 255 - mean) / std``."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(std, dtype=np.float64).reshape(3)
        if np.any(self.std <= 0):
            raise ValueError("std must be positive")

    @classmethod
    def fit(cls, pixels: np.ndarray) -> "Normalizer":
        scaled = pixels.astype(np.float64) / 255.0
        return cls(scaled.mean(axis=(0, 2, 3)), scaled.std(axis=(0, 2, 3)))

    def __call__(self, pixels, dtype=np.float32) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64) / 255.0
        shape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
        return ((x - self.mean.reshape(shape)) / self.std.reshape(shape)).astype(dtype)

    normalize = __call__

    def denormalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        shape = (3, 1, 1) if x.ndim == 3 else (1, 3, 1, 1)
        return (x * self.std.reshape(shape) + self.mean.reshape(shape)) * 255.0

    def save(self, path) -> None:
        values = list(self.mean) + list(self.std)
        Path(path).write_text("\n".join(repr(float(v)) for v in values) + "\n")

    @classmethod
    def load(cls, path) -> "Normalizer":
        values = [float(t) for t in Path(path).read_text().split()]
        if len(values) != 6:
            raise DatasetError(f"{path}: expected 6 numbers, found {len(values)}")
        return cls(values[:3], values[3:])

    @classmethod
    def cached(cls, path, pixels) -> "Normalizer":
        path = Path(path)
        if path.is_file():
            return cls.load(path)
        norm = cls.fit(pixels)
        norm.save(path)
        return norm


def normalize(img, norm: Normalizer) -> np.ndarray:
    return norm(img)


# -- augmentation ------------------------------------------------------------

def flip_pad_crop(pixels: np.ndarray, flip: bool, dy: int, dx: int) -> np.ndarray:
    """Mirror columns if asked, zero-pad 4 px and take the 32x32 window at (dy, dx)."""
    img = pixels[..., ::-1] if flip else pixels
    padded = np.pad(img, ((0, 0), (PAD, PAD), (PAD, PAD)))
    return padded[:, dy:dy + 32, dx:dx + 32]


def augment_batch(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random flip + padded crop for a uint8 batch (n, 3, 32, 32); returns uint8."""
    n = len(pixels)
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    src = np.where(flips[:, None, None, None], pixels[..., ::-1], pixels)
    padded = np.pad(src, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    rows = offsets[:, 0, None] + np.arange(32)
    cols = offsets[:, 1, None] + np.arange(32)
    idx = np.arange(n)[:, None, None, None]
    ch = np.arange(3)[None, :, None, None]
    return padded[idx, ch, rows[:, None, :, None], cols[:, None, None, :]]


def augment(img: LabeledImage, rng: np.random.Generator, norm: Normalizer) -> np.ndarray:
    """Training-time transform of one image to a normalized float (3, 32, 32)."""
    return norm(augment_batch(np.asarray(img.pixels)[None], rng)[0])


# -- synthetic data ------------------------------------------------------------

def synthetic_quadrants(n: int, rng: np.random.Generator, patch: int = 12):
    """Dark noisy images with one bright patch; the label is the patch's quadrant.

    Labels are balanced (n // 4 per class, remainder spread from class 0).
    """
    labels = rng.permutation(np.arange(n) % 4)
    pixels = rng.integers(0, 64, size=(n, *IMAGE_SHAPE), dtype=np.uint8)
    bright = rng.integers(192, 256, size=(n, 3, patch, patch), dtype=np.uint8)
    offs = rng.integers(0, 16 - patch + 1, size=(n, 2))
    for i, (lab, (oy, ox)) in enumerate(zip(labels, offs)):
        y0 = (lab // 2) * 16 + oy
        x0 = (lab % 2) * 16 + ox
        pixels[i, :, y0:y0 + patch, x0:x0 + patch] = bright[i]
    return pixels, labels.astype(np.int64)


# -- batching ----------------------------------------------------------------

class BatchIterator:
    """Seeded epoch iterator yielding normalized float batches.

    Training mode shuffles, augments and drops the last incomplete batch;
    evaluation mode keeps order and every sample.  The stream for an epoch is a
    pure function of (seed, epoch).
    """

    def __init__(self, pixels, labels, norm: Normalizer, batch_size: int = 128,
                 train: bool = True, augment: bool = True, seed: int = 0, dtype=np.float32):
        if len(pixels) != len(labels):
            raise ValueError("pixels and labels differ in length")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.pixels = pixels
        self.labels = np.asarray(labels)
        self.norm = norm
        self.batch_size = batch_size
        self.train = train
        self.augment = augment and train
        self.seed = seed
        self.dtype = dtype
        self.epoch = 0

    def __len__(self) -> int:
        n = len(self.labels)
        return n // self.batch_size if self.train else -(-n // self.batch_size)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __iter__(self):
        n = len(self.labels)
        if self.train:
            order = make_rng(self.seed, 1, self.epoch).permutation(n)
        else:
            order = np.arange(n)
        aug_rng = make_rng(self.seed, 2, self.epoch)
        for b in range(len(self)):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            px = self.pixels[idx]
            if self.augment:
                px = augment_batch(px, aug_rng)
            yield self.norm(px, self.dtype), self.labels[idx]
