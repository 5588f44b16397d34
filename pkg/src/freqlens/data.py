"""Dataset ingestion: CIFAR-10 binary files, a deterministic synthetic
dataset with known frequency structure, and batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_CLASSES = 10


@dataclass
class ImageBatch:
    """B x C x H x W float32 images in [0,1] with integer labels in [0, K)."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be B x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one integer per image")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image values must lie in [0,1]")

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Split:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return self.images.shape[0]


@dataclass
class Dataset:
    train: Split
    test: Split
    num_classes: int
    provenance: str = ""


def _load_cifar_file(path):
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        logger.warning("CIFAR file %s is empty; producing an empty split", path)
        return (np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=np.int64))
    if len(raw) % RECORD_BYTES != 0:
        offset = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise ValueError(
            f"{path}: length {len(raw)} is not a multiple of {RECORD_BYTES}; "
            f"trailing partial record starts at byte offset {offset}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise ValueError(
            f"{path}: record {bad[0]} has label byte {labels[bad[0]]} > {CIFAR_CLASSES - 1}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(train_paths, test_paths) -> Dataset:
    """Read CIFAR-10 binary-version files (3073-byte records: label byte then
    R/G/B planes row-major). Pixels map to [0,1] by /255; no normalization."""

    def load_many(paths):
        parts = [_load_cifar_file(p) for p in paths]
        if not parts:
            return Split(np.zeros((0, 3, 32, 32), dtype=np.float32), np.zeros(0, dtype=np.int64))
        return Split(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))

    return Dataset(train=load_many(train_paths), test=load_many(test_paths),
                   num_classes=CIFAR_CLASSES, provenance="cifar10-bin")


def write_cifar10_bin(split: Split, path):
    """Write a split in the CIFAR-10 binary layout. Pixels are rounded onto
    the /255 grid, so a reload is bitwise-identical for grid-aligned data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = np.asarray(split.images)
    if images.ndim != 4 or images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR binary layout requires B x 3 x 32 x 32, got {images.shape}")
    pix = np.round(images * 255.0).astype(np.uint8).reshape(len(split.labels), -1)
    labels = np.asarray(split.labels, dtype=np.uint8).reshape(-1, 1)
    path.write_bytes(np.concatenate([labels, pix], axis=1).tobytes())


def take_classes(dataset: Dataset, classes, n_train=None, n_test=None) -> Dataset:
    """Restrict a dataset to the given class list (labels remapped to 0..K-1),
    optionally truncating each split to the first n examples."""
    classes = list(classes)
    remap = {c: i for i, c in enumerate(classes)}

    def filt(split, n):
        keep = np.isin(split.labels, classes)
        images = split.images[keep]
        labels = np.array([remap[int(c)] for c in split.labels[keep]], dtype=np.int64)
        if n is not None:
            images, labels = images[:n], labels[:n]
        return Split(images, labels)

    return Dataset(train=filt(dataset.train, n_train), test=filt(dataset.test, n_test),
                   num_classes=len(classes), provenance=dataset.provenance + f"-subset{classes}")


# -- synthetic dataset -------------------------------------------------------

SYNTH_DEFAULTS = dict(lf_amp=0.15, hf_amp=0.06, noise_amp=0.03)


def _unit_sine(h, w, fr, fc, phase):
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return np.sqrt(2.0) * np.sin(2 * np.pi * (fr * rows / h + fc * cols / w) + phase)


def synth_expected_ratio(classes=2, channels=3, lf_amp=None, hf_amp=None, noise_amp=None):
    """Expected channel-axis LFI/HFI ratio of raw synthetic images.

    The base pattern and the 0.5 offset are shared across channels (pure LFI);
    texture and noise are independent per channel, splitting 1/C into the
    low part and (C-1)/C into the high part.
    """
    lf = SYNTH_DEFAULTS["lf_amp"] if lf_amp is None else lf_amp
    hf = SYNTH_DEFAULTS["hf_amp"] if hf_amp is None else hf_amp
    nz = SYNTH_DEFAULTS["noise_amp"] if noise_amp is None else noise_amp
    var_ind = hf ** 2 + nz ** 2
    low = channels * (0.25 + lf ** 2) + var_ind
    high = (channels - 1) * var_ind
    return float(np.sqrt(low / high))


def synth_dataset(seed, n_per_class_train, classes=2, size=16, n_per_class_test=None,
                  lf_amp=None, hf_amp=None, noise_amp=None) -> Dataset:
    """Deterministic class-conditional images: a class-specific low-frequency
    base pattern shared across channels, plus per-example high-frequency
    texture and noise per channel. Pixels land on the /255 grid so binary
    round-trips are exact."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    lf = SYNTH_DEFAULTS["lf_amp"] if lf_amp is None else lf_amp
    hf = SYNTH_DEFAULTS["hf_amp"] if hf_amp is None else hf_amp
    nz = SYNTH_DEFAULTS["noise_amp"] if noise_amp is None else noise_amp
    if n_per_class_test is None:
        n_per_class_test = max(1, n_per_class_train // 4)

    # distinct low-frequency pairs per class keep classes separable under
    # shifts and flips from the standard crop/flip pipeline
    freq_pairs = [(1, 2), (2, 1), (1, 1), (2, 2), (1, 3), (3, 1), (2, 3), (3, 2)]
    rng = np.random.default_rng(seed)
    channels = 3

    def make_split(n_per_class):
        n = n_per_class * classes
        images = np.empty((n, channels, size, size), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        idx = 0
        for k in range(classes):
            fr, fc = freq_pairs[k % len(freq_pairs)]
            base = _unit_sine(size, size, fr, fc, phase=2 * np.pi * k / classes)
            for _ in range(n_per_class):
                img = 0.5 + lf * base
                for c in range(channels):
                    tf = rng.integers(size // 4, size // 2)
                    tphase = rng.uniform(0, 2 * np.pi)
                    texture = _unit_sine(size, size, tf, tf, tphase)
                    img_c = img + hf * texture + nz * rng.standard_normal((size, size))
                    images[idx, c] = img_c
                labels[idx] = k
                idx += 1
        np.clip(images, 0.0, 1.0, out=images)
        images = np.round(images * 255.0).astype(np.float32) / np.float32(255.0)
        return images, labels

    train_images, train_labels = make_split(n_per_class_train)
    test_images, test_labels = make_split(n_per_class_test)
    return Dataset(train=Split(train_images, train_labels),
                   test=Split(test_images, test_labels),
                   num_classes=classes,
                   provenance=f"synth(seed={seed},classes={classes},size={size})")


def batches(split: Split, batch_size, shuffle=False, seed=0):
    """Iterate ImageBatch chunks. Order is storage order when shuffle is off
    (the first such batch is the probe batch) and a seed-determined
    permutation otherwise. The last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(split.images[idx], split.labels[idx])


def probe_batch(split: Split, batch_size) -> ImageBatch:
    """The fixed first unshuffled batch used for epoch-wise ratio tracking."""
    return next(batches(split, batch_size, shuffle=False))
