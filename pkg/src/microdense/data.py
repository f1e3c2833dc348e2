"""CIFAR binary ingestion, a seeded synthetic substitute, and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]
PIXELS = 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, 3, H, W), normalized
    labels: np.ndarray  # int64 class indices
    num_classes: int
    split: str = "train"
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    raw: Optional[np.ndarray] = field(default=None, repr=False)  # uint8 pixels, when loaded from CIFAR

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int, seed: int = 0) -> "Dataset":
        """First ``count`` records after a seeded shuffle."""
        idx = np.sort(np.random.default_rng(seed).permutation(len(self))[:count])
        return Dataset(
            self.images[idx], self.labels[idx], self.num_classes, self.split,
            self.mean, self.std, None if self.raw is None else self.raw[idx],
        )

    def normalization(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


# ---------------------------------------------------------------- CIFAR binary


def _record_size(variant: str) -> int:
    if variant == "cifar10":
        return 1 + PIXELS
    if variant == "cifar100":
        return 2 + PIXELS
    raise ValueError(f"unknown CIFAR variant {variant!r}")


def parse_cifar_bytes(buf: bytes, variant: str = "cifar10", source: str = "<bytes>"):
    """Split raw CIFAR records into (uint8 images (N,3,32,32), int64 labels)."""
    rec = _record_size(variant)
    if len(buf) % rec:
        whole = len(buf) // rec
        raise DataFormatError(
            f"{source}: length {len(buf)} is not a multiple of the {rec}-byte record size; "
            f"trailing partial record starts at byte offset {whole * rec}"
        )
    arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    label_col = 0 if variant == "cifar10" else 1  # cifar100: coarse, fine
    labels = arr[:, label_col].astype(np.int64)
    images = arr[:, rec - PIXELS :].reshape(-1, 3, 32, 32)
    return images.copy(), labels


def write_cifar_bytes(images: np.ndarray, labels: np.ndarray, variant: str = "cifar10",
                      coarse_labels: Optional[np.ndarray] = None) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    if variant == "cifar10":
        cols = [labels, images]
    else:
        coarse = np.zeros_like(labels) if coarse_labels is None else np.asarray(coarse_labels, np.uint8).reshape(-1, 1)
        cols = [coarse, labels, images]
    return np.concatenate(cols, axis=1).tobytes()


def channel_stats(raw: np.ndarray) -> tuple[tuple, tuple]:
    x = raw.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return tuple(float(v) for v in mean), tuple(float(v) for v in std)


def normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    return (x - np.asarray(mean).reshape(1, 3, 1, 1)) / np.asarray(std).reshape(1, 3, 1, 1)


def _read_split(root: Path, names: list[str], variant: str):
    missing = [n for n in names if not (root / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{root}: missing {variant} files {missing}; expected {names}")
    parts = [parse_cifar_bytes((root / n).read_bytes(), variant, str(root / n)) for n in names]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def load_cifar(directory, split: str = "train", variant: str = "cifar10",
               normalization: Optional[dict] = None) -> Dataset:
    """Load a CIFAR-10/100 binary split.

    Normalization constants come from ``normalization`` when given, otherwise
    from the training split of the same directory.
    """
    root = Path(directory)
    train_names = CIFAR10_TRAIN if variant == "cifar10" else CIFAR100_TRAIN
    test_names = CIFAR10_TEST if variant == "cifar10" else CIFAR100_TEST
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    raw, labels = _read_split(root, train_names if split == "train" else test_names, variant)
    if normalization is None:
        train_raw = raw if split == "train" else _read_split(root, train_names, variant)[0]
        mean, std = channel_stats(train_raw)
    else:
        mean, std = tuple(normalization["mean"]), tuple(normalization["std"])
    num_classes = 10 if variant == "cifar10" else 100
    return Dataset(normalize(raw, mean, std), labels, num_classes, split, mean, std, raw)


def save_normalization(path, dataset: Dataset) -> None:
    Path(path).write_text(json.dumps(dataset.normalization(), indent=1))


def load_normalization(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    num_classes: int = 10
    train_per_class: int = 20
    test_per_class: int = 20
    image_size: int = 16
    seed: int = 0
    sigma: float = 0.0
    cell: int = 4  # template detail: one random value per cell x cell patch

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """One fixed unit-variance blocky pattern per class, shape (K, 3, S, S)."""
    rng = np.random.default_rng([spec.seed, 0xC1A55])
    coarse = max(1, spec.image_size // spec.cell)
    base = rng.standard_normal((spec.num_classes, 3, coarse, coarse))
    up = np.kron(base, np.ones((1, 1, spec.cell, spec.cell)))
    return up[:, :, : spec.image_size, : spec.image_size]


def _sample(spec: SyntheticSpec, templates: np.ndarray, per_class: int, stream: int, split: str) -> Dataset:
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = templates[labels] + spec.sigma * rng.standard_normal((len(labels),) + templates.shape[1:])
    return Dataset(images, labels.astype(np.int64), spec.num_classes, split)


def make_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Template-plus-noise classification task; train and test use disjoint noise streams."""
    templates = class_templates(spec)
    return (
        _sample(spec, templates, spec.train_per_class, 1, "train"),
        _sample(spec, templates, spec.test_per_class, 2, "test"),
    )


def nearest_template_accuracy(data: Dataset, templates: np.ndarray) -> float:
    flat = data.images.reshape(len(data), -1)
    t = templates.reshape(len(templates), -1)
    d = ((flat[:, None, :] - t[None]) ** 2).sum(-1)
    return float((d.argmin(1) == data.labels).mean())


# ---------------------------------------------------------------- batching


def epoch_order(seed: int, epoch: int, length: int) -> np.ndarray:
    """Shuffle order for one epoch: a pure function of (seed, epoch, length)."""
    return np.random.default_rng([seed, epoch, length]).permutation(length)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and pad-and-crop."""
    B, C, H, W = images.shape
    flip = rng.random(B) < 0.5
    out = np.where(flip[:, None, None, None], images[..., ::-1], images)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    return np.stack([padded[b, :, dy[b] : dy[b] + H, dx[b] : dx[b] + W] for b in range(B)])
