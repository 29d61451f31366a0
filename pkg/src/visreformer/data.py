"""Datasets: CIFAR-10 binary batches, a synthetic two-class set, light augmentation.

CIFAR-10 records are 3073 bytes: one label byte followed by 3072 pixel bytes,
channel-major (R, G, B) and row-major within each channel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream
from .errors import ConfigError, DataError, IngestionError

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int
    class_names: tuple
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if self.split not in ("train", "val"):
            raise ConfigError(f"split must be 'train' or 'val', got {self.split!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.class_names, self.split)


def read_cifar_file(path) -> tuple:
    """Parse one binary batch file into ``(images uint8 [N,3,32,32], labels)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: missing CIFAR-10 batch file (byte offset 0)") from exc
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable ({exc})") from exc
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        whole = len(raw) // RECORD_BYTES
        raise IngestionError(
            f"{path}: truncated record {whole} at byte offset {whole * RECORD_BYTES} "
            f"(file has {len(raw)} bytes, records are {RECORD_BYTES})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * RECORD_BYTES}")
    return records[:, 1:].reshape(-1, *IMAGE_SHAPE), labels


def balanced_subset(labels: np.ndarray, per_class: int, n_classes: int) -> np.ndarray:
    """Indices of the first ``per_class`` records of each class, in file order."""
    keep = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size < per_class:
            raise DataError(f"class {c} has only {idx.size} records, {per_class} requested")
        keep.append(idx[:per_class])
    return np.sort(np.concatenate(keep))


def load_cifar10(path, subset_per_class: int | None = None, dtype=np.float64) -> tuple:
    """Load ``(train, val)``; the official test batch serves as validation."""
    path = Path(path)
    parts = [read_cifar_file(path / name) for name in CIFAR10_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    val_x, val_y = read_cifar_file(path / CIFAR10_TEST_FILE)
    if subset_per_class is not None:
        keep = balanced_subset(train_y, subset_per_class, 10)
        train_x, train_y = train_x[keep], train_y[keep]
    scale = np.asarray(255.0, dtype=dtype)
    train = LabeledImageSet(train_x.astype(dtype) / scale, train_y, CIFAR10_CLASSES, "train")
    val = LabeledImageSet(val_x.astype(dtype) / scale, val_y, CIFAR10_CLASSES, "val")
    return train, val


def write_cifar_file(path, images_uint8: np.ndarray, labels) -> None:
    """Write records in the CIFAR-10 binary layout (used for test fixtures)."""
    images_uint8 = np.asarray(images_uint8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_uint8], axis=1)
    Path(path).write_bytes(rec.tobytes())


def synth_twoclass(n: int, D_img: int, separation: float, rng: RngStream, channels: int = 3,
                   noise: float = 0.1, dtype=np.float64) -> LabeledImageSet:
    """Two Gaussian clouds around patterns A and B with ``||A - B|| = separation``.

    Patterns sit symmetrically about mid-grey along a random sign direction;
    samples are clipped to [0, 1].
    """
    if n % 2:
        raise ConfigError("synth_twoclass needs an even n")
    shape = (channels, D_img, D_img)
    d = channels * D_img * D_img
    direction = np.where(rng.child(0).uniform(size=d) < 0.5, -1.0, 1.0) / np.sqrt(d)
    a = 0.5 + 0.5 * separation * direction
    b = 0.5 - 0.5 * separation * direction
    labels = np.repeat([0, 1], n // 2)[rng.child(1).permutation(n)]
    centres = np.where(labels[:, None] == 0, a, b)
    x = np.clip(centres + noise * rng.child(2).normal((n, d)), 0.0, 1.0)
    return LabeledImageSet(x.reshape(n, *shape).astype(dtype), labels, ("A", "B"), "train")


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip_prob: float = 0.5
    crop_padding: int = 4
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ConfigError("horizontal_flip_prob must be in [0, 1]")
        if self.crop_padding < 0:
            raise ConfigError("crop_padding must be >= 0")


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: RngStream) -> np.ndarray:
    """Per-image random horizontal flip, then zero-pad and random-crop back to H x W."""
    if not policy.enabled:
        return batch
    out = np.array(batch, copy=True)
    N, _, H, W = out.shape
    flips = rng.child(0).uniform(size=N) < policy.horizontal_flip_prob
    out[flips] = out[flips][..., ::-1]
    p = policy.crop_padding
    if p:
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offsets = rng.child(1).integers(0, 2 * p + 1, size=(N, 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    return out


__all__ = [
    "AugmentPolicy",
    "CIFAR10_CLASSES",
    "LabeledImageSet",
    "augment",
    "balanced_subset",
    "load_cifar10",
    "read_cifar_file",
    "synth_twoclass",
    "write_cifar_file",
]
