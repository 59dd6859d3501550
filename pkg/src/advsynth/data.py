"""Datasets: ingestion, a synthetic toy set, augmentation, batching, export.

The toy set renders one geometric primitive per class (horizontal bar,
filled circle, cross) at a jittered position with jittered contrast, then
adds Gaussian pixel noise.  The classes differ in orientation energy, which
keeps them separable for a small convnet even at low resolution.  It is hard enough that an undefended classifier is
attackable yet cleanly separable, which is what the end-to-end trend checks
need.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset file; message carries the byte offset when known."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w, c) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    split: str
    num_classes: int
    family: str = "toy"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise ValueError(f"Dataset: need nonempty NHWC images, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"Dataset: {self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("Dataset: pixel values outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"Dataset: labels outside [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValueError(f"Dataset: split must be train or test, got {self.split!r}")

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class ToySpec:
    classes: int = 3
    samples_per_class: int = 1200
    image_size: int = 16
    # keep the pixel noise well under the attack budget: heavy noise acts
    # like smoothing augmentation and makes even an undefended model robust
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ValueError(f"ToySpec: image_size must be >= 8, got {self.image_size}")
        if self.classes < 2:
            raise ValueError(f"ToySpec: need >= 2 classes, got {self.classes}")
        if self.samples_per_class < 6:
            raise ValueError(f"ToySpec: need >= 6 samples per class for the 5:1 split")


def _draw_shape(size: int, cls: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    kind = cls % 3
    if kind == 0:  # filled horizontal bar
        mask = (np.abs(dy) <= 0.5 * r) & (np.abs(dx) <= 1.35 * r)
    elif kind == 1:  # filled circle
        mask = dy * dy + dx * dx <= r * r
    else:  # cross
        bar = max(1.0, r / 3.0)
        mask = ((np.abs(dy) <= bar) & (np.abs(dx) <= r)) | ((np.abs(dx) <= bar) & (np.abs(dy) <= r))
    return mask.astype(np.float64)


def synth_toy(spec: ToySpec) -> tuple[Dataset, Dataset]:
    """Deterministic class-balanced synthetic set with a fixed 5:1 split."""
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    n_total = spec.classes * spec.samples_per_class
    images = np.empty((n_total, s, s, 3), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    r_base = s * 0.24
    jitter = s * 0.16
    idx = 0
    for cls in range(spec.classes):
        for _ in range(spec.samples_per_class):
            cy = s / 2 - 0.5 + rng.uniform(-jitter, jitter)
            cx = s / 2 - 0.5 + rng.uniform(-jitter, jitter)
            # size floor keeps the smallest circles distinguishable from
            # squares after two stride-2 downsamplings
            r = r_base * rng.uniform(0.95, 1.25)
            # contrast floor keeps every shape several attack budgets above
            # the background, so label ambiguity never explains a miss
            contrast = rng.uniform(0.35, 0.60)
            # per-image background level keeps batch statistics away from
            # degenerate zero-variance channels in the noise_std=0 limit
            background = rng.uniform(0.20, 0.30)
            mask = _draw_shape(s, cls, cy, cx, r)
            img = background + contrast * mask
            img = img[:, :, None] + rng.normal(0.0, spec.noise_std, size=(s, s, 3))
            images[idx] = np.clip(img, 0.0, 1.0, out=img).astype(np.float32)
            labels[idx] = cls
            idx += 1
    n_test = spec.samples_per_class // 6
    n_train = spec.samples_per_class - n_test
    tr_idx, te_idx = [], []
    for cls in range(spec.classes):
        start = cls * spec.samples_per_class
        tr_idx.extend(range(start, start + n_train))
        te_idx.extend(range(start + n_train, start + spec.samples_per_class))
    train = Dataset(images[tr_idx], labels[tr_idx], "train", spec.classes, "toy")
    test = Dataset(images[te_idx], labels[te_idx], "test", spec.classes, "toy")
    return train, test


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 10000 records of 3073 bytes (label + planar RGB)

_CIFAR_RECORD = 3073
_CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST = ["test_batch.bin"]


def _parse_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    size = os.path.getsize(path)
    if size == 0 or size % _CIFAR_RECORD != 0:
        raise DataFormatError(
            f"{path}: truncated CIFAR-10 file, {size} bytes; partial record begins at byte offset {size - size % _CIFAR_RECORD}"
        )
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, _CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        rec = int(bad[0])
        raise DataFormatError(
            f"{path}: corrupt label {int(labels[rec])} in record {rec} (byte offset {rec * _CIFAR_RECORD})"
        )
    pixels = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = (pixels.astype(np.float32) / np.float32(255.0))
    return images, labels


def load_cifar10_binary(path: str) -> tuple[Dataset, Dataset]:
    """Loads the binary-version batch files from `path` (directory)."""
    base = path
    if not os.path.isdir(base):
        raise DataFormatError(f"{path}: not a directory of CIFAR-10 binary batches")
    nested = os.path.join(base, "cifar-10-batches-bin")
    if os.path.isdir(nested):
        base = nested

    def load_files(names, split):
        parts = [_parse_cifar_file(os.path.join(base, n)) for n in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        return Dataset(images, labels, split, 10, "cifar10")

    return load_files(_CIFAR_TRAIN, "train"), load_files(_CIFAR_TEST, "test")


def load_svhn(path: str) -> tuple[Dataset, Dataset]:
    raise NotImplementedError("SVHN ingestion is stubbed; use the native dataset format instead")


def load_cifar100_binary(path: str) -> tuple[Dataset, Dataset]:
    raise NotImplementedError("CIFAR-100 ingestion is stubbed; use the native dataset format instead")


# ---------------------------------------------------------------------------
# Augmentation (CIFAR-style sets only; toy/SVHN-style runs disable it)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :]


def random_crop(img: np.ndarray, oy: int, ox: int, pad: int = 4) -> np.ndarray:
    h, w = img.shape[0], img.shape[1]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    return padded[oy : oy + h, ox : ox + w, :]


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Reflect-pad by 4, random crop, flip with probability 0.5, per image.

    Draw order per batch: crop offsets (y then x, per image), then flip
    coins; fixed so a seeded rng reproduces the batch exactly.
    """
    n, h, w, _c = batch.shape
    oys = rng.integers(0, 2 * pad + 1, size=n)
    oxs = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(batch)
    for i in range(n):
        img = random_crop(batch[i], int(oys[i]), int(oxs[i]), pad)
        out[i] = hflip(img) if flips[i] else img
    return out


# ---------------------------------------------------------------------------
# Batching


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation derived from (seed, epoch) only, so a resumed run can
    reconstruct batch order mid-stream."""
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def batch_iterator(dataset: Dataset, n: int, seed: int, drop_last: bool, epochs: int = 1):
    if n > dataset.n:
        raise ValueError(f"batch_iterator: batch size {n} exceeds dataset size {dataset.n}")
    for epoch in range(epochs):
        perm = epoch_permutation(dataset.n, seed, epoch)
        limit = dataset.n - (dataset.n % n) if drop_last else dataset.n
        for start in range(0, limit, n):
            sel = perm[start : start + n]
            yield dataset.images[sel], dataset.labels[sel]


# ---------------------------------------------------------------------------
# Native export format (little-endian):
#   magic "ADS1" | u32 version=1 | u64 N | u32 h | u32 w | u32 c | u32 C
#   | u8 split (0 train, 1 test) | u8 family length | family utf-8
#   | N x i64 labels | N*h*w*c f32 pixels

_MAGIC = b"ADS1"
_VERSION = 1


def save_dataset(ds: Dataset, path: str) -> None:
    fam = ds.family.encode()
    if len(fam) > 255:
        raise ValueError("family tag too long")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQIIII", _VERSION, ds.n, *ds.images.shape[1:], ds.num_classes))
        f.write(struct.pack("<BB", 0 if ds.split == "train" else 1, len(fam)))
        f.write(fam)
        f.write(ds.labels.astype("<i8").tobytes())
        f.write(ds.images.astype("<f4").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at byte offset 0")
        header = f.read(struct.calcsize("<IQIIII"))
        if len(header) < struct.calcsize("<IQIIII"):
            raise DataFormatError(f"{path}: truncated header at byte offset {4 + len(header)}")
        version, n, h, w, c, num_classes = struct.unpack("<IQIIII", header)
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        split_code, fam_len = struct.unpack("<BB", f.read(2))
        family = f.read(fam_len).decode()
        labels = np.frombuffer(f.read(n * 8), dtype="<i8").astype(np.int64)
        if labels.shape[0] != n:
            raise DataFormatError(f"{path}: truncated label table")
        raw = f.read(n * h * w * c * 4)
        if len(raw) != n * h * w * c * 4:
            raise DataFormatError(f"{path}: truncated pixel data, got {len(raw)} bytes")
        images = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, h, w, c)
    return Dataset(images, labels, "train" if split_code == 0 else "test", num_classes, family)
