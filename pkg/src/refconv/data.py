"""Dataset ingestion and augmentation.

Covers the CIFAR-10 binary batch format (1 label byte + 3072 channel-major
pixel bytes per record), deterministic stratified subsets, two synthetic
generators, and the crop/flip training augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import Array, ConvSpec, ShapeError, conv2d_forward

IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class DataError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: Array   # (n, 3, 32, 32) float32 in [0, 1]
    labels: Array   # (n,) int64 in [0, classes)
    split: str
    mean: Array     # per-channel, from the originating train split
    std: Array
    classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != IMAGE_SHAPE:
            raise DataError(f"images shape {self.images.shape}, expected (n,) + {IMAGE_SHAPE}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError("labels length does not match images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return self.images.shape[0]


def channel_stats(images: Array) -> tuple[Array, Array]:
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


def normalize(batch: Array, mean: Array, std: Array) -> Array:
    return (batch - mean[None, :, None, None]) / std[None, :, None, None]


def _read_batch_file(path: Path) -> tuple[Array, Array]:
    if not path.is_file():
        raise DataError(f"missing batch file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise DataError(f"{path}: {raw.size} bytes is not a whole number of "
                        f"{RECORD_BYTES}-byte records")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Read the standard binary batches; pixels scaled by 1/255.

    Normalization stats come from the train split and are attached to both.
    """
    root = Path(path)
    train_parts = [_read_batch_file(root / f) for f in TRAIN_FILES]
    images = np.concatenate([p[0] for p in train_parts])
    labels = np.concatenate([p[1] for p in train_parts])
    test_images, test_labels = _read_batch_file(root / TEST_FILE)
    mean, std = channel_stats(images)
    train = Dataset(images, labels, "train", mean, std)
    test = Dataset(test_images, test_labels, "test", mean, std)
    return train, test


def write_cifar10_batches(train: Dataset, test: Dataset, out_dir) -> Path:
    """Serialize datasets to the same binary layout (synthetic sets included)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for fname, idx in zip(TRAIN_FILES, chunks):
        _write_records(train, idx, out / fname)
    _write_records(test, np.arange(len(test)), out / TEST_FILE)
    return out


def _write_records(ds: Dataset, idx: Array, path: Path) -> None:
    n = len(idx)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = ds.labels[idx]
    pixels = np.clip(np.rint(ds.images[idx] * 255.0), 0, 255).astype(np.uint8)
    rec[:, 1:] = pixels.reshape(n, -1)
    path.write_bytes(rec.tobytes())


def subset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Deterministic stratified subsample preserving class balance.

    Keeps the parent's normalization stats so training on a subset and
    evaluating on the full split see the same input scaling.
    """
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B5E7]))
    keep = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        take = int(len(idx) * fraction + 0.5)
        if len(idx) and take == 0:
            raise DataError(f"fraction {fraction} leaves class {c} empty")
        keep.append(rng.permutation(idx)[:take])
    order = rng.permutation(np.concatenate(keep))
    return replace(ds, images=ds.images[order], labels=ds.labels[order])


def synth_blobs(n: int, classes: int, seed: int) -> Dataset:
    """Class-conditional color/texture blobs a linear probe already separates."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB10B5]))
    protos = rng.uniform(0.25, 0.75, size=(classes, 3))
    labels = np.arange(n) % classes
    images = protos[labels][:, :, None, None] + 0.15 * rng.standard_normal((n, 3, 32, 32))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(n)
    images, labels = images[order], labels[order].astype(np.int64)
    mean, std = channel_stats(images)
    return Dataset(images, labels, "train", mean, std, classes=classes)


def synth_textures(n: int, classes: int, seed: int, noise: float = 1.5,
                   split: str = "train") -> Dataset:
    """Harder generator: class identity lives in spatial texture statistics.

    Each class owns a pair of 5x5 filters; a sample is filtered white noise
    (random per-sample mixture of the pair), pushed into class-specific color
    channels, plus heavy pixel noise. Linear probes do poorly; a small CNN
    has headroom without saturating. Class prototypes are fixed independently
    of `seed`, so different seeds sample fresh data from the same task.
    """
    ss = np.random.SeedSequence([seed, 0x7E47])
    class_rng = np.random.default_rng(np.random.SeedSequence([9999, 0x7E47]))
    rng = np.random.default_rng(ss)
    filt = class_rng.standard_normal((classes, 2, 5, 5)).astype(np.float32)
    chan_mix = class_rng.standard_normal((classes, 3)).astype(np.float32)
    chan_mix /= np.linalg.norm(chan_mix, axis=1, keepdims=True)

    # every class shares the same mean (0.5 gray): the signal is second-order,
    # so raw-pixel linear probes stay near chance while a CNN can learn it
    labels = np.arange(n) % classes
    images = np.empty((n, 3, 32, 32), dtype=np.float32)
    spec = ConvSpec(1, 1, 5)
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        z = rng.standard_normal((len(idx), 1, 36, 36)).astype(np.float32)
        f1 = conv2d_forward(z, filt[c, 0].reshape(1, 1, 5, 5), spec)
        f2 = conv2d_forward(z, filt[c, 1].reshape(1, 1, 5, 5), spec)
        u = rng.random((len(idx), 1, 1, 1)).astype(np.float32)
        field = u * f1 + (1.0 - u) * f2
        field -= field.mean(axis=(1, 2, 3), keepdims=True)
        field /= field.std(axis=(1, 2, 3), keepdims=True) + 1e-6
        img = (0.5
               + 0.16 * chan_mix[c][None, :, None, None] * field
               + noise * 0.16 * rng.standard_normal((len(idx), 3, 32, 32)).astype(np.float32))
        images[idx] = img
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    images, labels = images[order], labels[order].astype(np.int64)
    mean, std = channel_stats(images)
    return Dataset(images, labels, split, mean, std, classes=classes)


def synth_texture_pair(n_train: int, n_test: int, classes: int, seed: int,
                       noise: float = 1.5) -> tuple[Dataset, Dataset]:
    """Train/test texture datasets; test carries the train split's stats."""
    train = synth_textures(n_train, classes, seed, noise=noise, split="train")
    test = synth_textures(n_test, classes, seed + 100_003, noise=noise, split="test")
    test = replace(test, mean=train.mean, std=train.std)
    return train, test


@dataclass(frozen=True)
class AugmentPolicy:
    random_crop: bool = True
    horizontal_flip: bool = True
    pad: int = 4
    crop: int = 32
    flip_p: float = 0.5

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(random_crop=False, horizontal_flip=False)


def upsample_nearest(batch: Array, factor: int) -> Array:
    """Integer-factor nearest-neighbor upsampling (the resize-224 path)."""
    return batch.repeat(factor, axis=2).repeat(factor, axis=3)


def flip_horizontal(batch: Array) -> Array:
    return batch[:, :, :, ::-1].copy()


def augment(batch: Array, policy: AugmentPolicy, rng: np.random.Generator) -> Array:
    """Per-sample reflect-pad + random crop, then horizontal flip with p."""
    if not (policy.random_crop or policy.horizontal_flip):
        return batch
    out = batch
    if policy.random_crop:
        p, c = policy.pad, policy.crop
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        hs = rng.integers(0, 2 * p + 1, size=len(out))
        ws = rng.integers(0, 2 * p + 1, size=len(out))
        out = np.empty_like(batch)
        for i in range(len(batch)):
            out[i] = padded[i, :, hs[i]:hs[i] + c, ws[i]:ws[i] + c]
    if policy.horizontal_flip:
        if out is batch:
            out = batch.copy()
        mask = rng.random(len(out)) < policy.flip_p
        out[mask] = out[mask][:, :, :, ::-1]
    return out
