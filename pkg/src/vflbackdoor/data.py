"""Datasets split by feature columns across parties.

MNIST is read from the standard big-endian IDX files, NUS-WIDE from its
numeric text tables, and a synthetic generator needs no files at all.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

NUSWIDE_CLASSES = ("buildings", "grass", "animal", "water", "person")


@dataclass
class PartitionedDataset:
    blocks: list[np.ndarray]  # one (N, d_k) feature block per party, party order
    labels: np.ndarray
    num_classes: int
    poison_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    target_ids: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.poison_ids = np.unique(np.asarray(self.poison_ids, dtype=np.int64))
        self.target_ids = np.unique(np.asarray(self.target_ids, dtype=np.int64))
        n = len(self.labels)
        if any(b.shape[0] != n for b in self.blocks):
            raise DataError("feature blocks and labels disagree on the sample count")
        for ids in (self.poison_ids, self.target_ids):
            if ids.size and (ids[0] < 0 or ids[-1] >= n):
                raise DataError("sample ids out of range")
        if np.intersect1d(self.poison_ids, self.target_ids).size:
            raise DataError("poison and target sets overlap")

    def __len__(self):
        return len(self.labels)

    @property
    def widths(self) -> list[int]:
        return [b.shape[1] for b in self.blocks]

    def features(self) -> np.ndarray:
        """All blocks concatenated in party order."""
        return np.concatenate(self.blocks, axis=1)

    def clean_ids(self) -> np.ndarray:
        return np.setdiff1d(np.arange(len(self)), self.poison_ids)

    def rows(self, ids) -> list[np.ndarray]:
        return [b[ids] for b in self.blocks]


# Triggers -----------------------------------------------------------------

@dataclass(frozen=True)
class PixelPattern:
    pixels: tuple  # (row, col, value) triples


@dataclass(frozen=True)
class FeatureEquals:
    feature: int
    value: float = 1.0


MNIST_TRIGGER = PixelPattern(((25, 27, 255), (27, 25, 255), (26, 26, 255), (27, 27, 255)))
NUSWIDE_TRIGGER = FeatureEquals(-1, 1.0)


def inject_trigger(images: np.ndarray, ids, pattern: PixelPattern = MNIST_TRIGGER) -> np.ndarray:
    """Return a copy of ``images`` with the pattern stamped on the selected ones."""
    images = np.array(images, copy=True)
    h, w = images.shape[1:3]
    for r, c, _ in pattern.pixels:
        if not (0 <= r < h and 0 <= c < w):
            raise ConfigError(f"trigger pixel ({r}, {c}) outside {h}x{w} image")
    ids = np.asarray(ids, dtype=np.int64)
    for r, c, v in pattern.pixels:
        images[ids, r, c] = v
    return images


# MNIST ----------------------------------------------------------------------

_MNIST_FILES = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def _find(directory: Path, names: Sequence[str]) -> Path:
    for name in names:
        for candidate in (directory / name, directory / f"{name}.gz"):
            if candidate.is_file():
                return candidate
    raise DataError(f"missing MNIST file {names[0]} in {directory}")


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse one IDX file (labels: magic 2049, images: magic 2051)."""
    path = Path(path)
    raw = _read_bytes(path)
    n_dims = 1 if expected_magic == LABEL_MAGIC else 3
    header = 4 * (1 + n_dims)
    if len(raw) < header:
        raise DataError(f"{path.name}: truncated header")
    magic, *dims = struct.unpack(f">{1 + n_dims}i", raw[:header])
    if magic != expected_magic:
        raise DataError(f"{path.name}: magic number {magic}, expected {expected_magic}")
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise DataError(f"{path.name}: truncated payload ({len(raw) - header} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(directory) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Raw uint8 ``(train_images, train_labels, test_images, test_labels)``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"MNIST directory {directory} does not exist")
    paths = {k: _find(directory, v) for k, v in _MNIST_FILES.items()}
    out = []
    for split in ("train", "test"):
        images = read_idx(paths[f"{split}_images"], IMAGE_MAGIC)
        labels = read_idx(paths[f"{split}_labels"], LABEL_MAGIC)
        if len(images) != len(labels):
            raise DataError(
                f"{paths[f'{split}_images'].name}: {len(images)} images but "
                f"{paths[f'{split}_labels'].name} has {len(labels)} labels"
            )
        out += [images, labels]
    return tuple(out)


def partition_rows(images: np.ndarray, split_row: int = 14) -> tuple[np.ndarray, np.ndarray]:
    """Top rows to party A, bottom rows to party B, each flattened."""
    n = images.shape[0]
    top = images[:, :split_row, :].reshape(n, -1)
    bottom = images[:, split_row:, :].reshape(n, -1)
    return top, bottom


def select_poison_mnist(n_train_total: int, n_test_total: int, n_train: int = 600,
                        n_test: int = 100, seed: int = 0,
                        exclude_train=()) -> tuple[np.ndarray, np.ndarray]:
    if n_train > n_train_total or n_test > n_test_total:
        raise ConfigError("more poison samples requested than the split holds")
    rng = np.random.default_rng(seed)
    pool = np.setdiff1d(np.arange(n_train_total), np.asarray(exclude_train, dtype=np.int64))
    train = np.sort(rng.choice(pool, n_train, replace=False))
    test = np.sort(rng.choice(n_test_total, n_test, replace=False))
    return train, test


def mnist_datasets(directory, seed: int = 0, n_poison_train: int = 600,
                   n_poison_test: int = 100) -> tuple[PartitionedDataset, PartitionedDataset]:
    """Poisoned, triggered, [0, 1]-scaled MNIST split between two row-halves."""
    tr_x, tr_y, te_x, te_y = load_mnist(directory)
    tr_ids, te_ids = select_poison_mnist(len(tr_x), len(te_x), n_poison_train, n_poison_test, seed)
    out = []
    for x, y, ids, split in ((tr_x, tr_y, tr_ids, "train"), (te_x, te_y, te_ids, "test")):
        x = inject_trigger(x, ids).astype(np.float64) / 255.0
        out.append(PartitionedDataset(list(partition_rows(x)), y, 10, ids, split=split))
    return out[0], out[1]


# NUS-WIDE ------------------------------------------------------------------

@dataclass
class NusWideLayout:
    """Relative file paths; ``{split}`` is ``Train`` or ``Test``."""

    image_features: tuple = (
        "Low_Level_Features/{split}_Normalized_CH.dat",
        "Low_Level_Features/{split}_Normalized_CM55.dat",
        "Low_Level_Features/{split}_Normalized_CORR.dat",
        "Low_Level_Features/{split}_Normalized_EDH.dat",
        "Low_Level_Features/{split}_Normalized_WT.dat",
    )
    text_features: str = "NUS_WID_Tags/{split}_Tags1k.dat"
    concept_labels: str = "Groundtruth/TrainTestLabels/Labels_{concept}_{split}.txt"
    image_width: int = 634
    text_width: int = 1000


def read_table(path) -> np.ndarray:
    """Numeric table separated by commas or whitespace."""
    import pandas as pd

    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing NUS-WIDE file {path}")
    with open(path) as f:
        first = f.readline()
    sep = "," if "," in first else r"\s+"
    try:
        frame = pd.read_csv(path, sep=sep, header=None, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path.name}: {exc}") from exc
    return frame.dropna(axis=1, how="all").to_numpy()


def load_nuswide(directory, split: str = "train", classes: Sequence[str] = NUSWIDE_CLASSES,
                 layout: NusWideLayout | None = None) -> PartitionedDataset:
    """Image features to party A, text tags to party B.

    Keeps only samples tagged with exactly one of ``classes``; labels follow the
    order of ``classes``. Samples whose last text feature is 1 form the poison set.
    """
    layout = layout or NusWideLayout()
    directory = Path(directory)
    tag = {"train": "Train", "test": "Test"}[split]
    image = np.hstack([read_table(directory / p.format(split=tag)) for p in layout.image_features])
    text = read_table(directory / layout.text_features.format(split=tag))
    concepts = np.column_stack([
        read_table(directory / layout.concept_labels.format(concept=c, split=tag))[:, 0]
        for c in classes
    ])
    if image.shape[1] != layout.image_width:
        raise DataError(f"expected {layout.image_width} image features, found {image.shape[1]}")
    if text.shape[1] != layout.text_width:
        raise DataError(f"expected {layout.text_width} text features, found {text.shape[1]}")
    if not (len(image) == len(text) == len(concepts)):
        raise DataError(
            f"row counts differ: image {len(image)}, text {len(text)}, labels {len(concepts)}"
        )
    keep = np.flatnonzero((concepts > 0).sum(axis=1) == 1)
    labels = np.argmax(concepts[keep] > 0, axis=1)
    text = text[keep]
    return PartitionedDataset([image[keep], text], labels, len(classes),
                              select_poison_nuswide(text), split=split)


def select_poison_nuswide(text_block: np.ndarray, trigger: FeatureEquals = NUSWIDE_TRIGGER) -> np.ndarray:
    return np.flatnonzero(text_block[:, trigger.feature] == trigger.value)


def nuswide_datasets(directory, classes: Sequence[str] = NUSWIDE_CLASSES,
                     layout: NusWideLayout | None = None):
    return (load_nuswide(directory, "train", classes, layout),
            load_nuswide(directory, "test", classes, layout))


# Synthetic -----------------------------------------------------------------

def synth_generate(n: int, d_per_party: int = 10, num_classes: int = 5, seed: int = 0,
                   n_parties: int = 2, separation: float = 1.0, n_tags: int = 0,
                   tag_on: float = 0.5, tag_off: float = 0.01, tags_per_class: int = 5,
                   poison_fraction: float = 0.01, centers_seed: int | None = None,
                   split: str = "train") -> PartitionedDataset:
    """Gaussian class blobs split column-wise across parties.

    Each party holds ``d_per_party`` features around a class mean drawn with
    scale ``separation``. With ``n_tags > 0`` the last party instead holds
    sparse binary tags, like the text block of an image/text dataset: each
    class switches on its own ``tags_per_class`` tags with probability
    ``tag_on`` and every other tag with probability ``tag_off``. The last party
    also gets one binary trigger column; samples with the trigger set form the
    poison set.

    Class means and tag sets come from ``centers_seed`` (default ``seed``) so a
    train and a test set can share them.
    """
    if n <= 0 or d_per_party <= 0 or num_classes <= 1 or n_parties < 1 or n_tags < 0:
        raise ConfigError("synthetic dataset sizes must be positive")
    if not (0 <= tag_off <= 1 and 0 <= tag_on <= 1) or not 0 <= poison_fraction <= 1:
        raise ConfigError("synthetic probabilities must lie in [0, 1]")
    if n_tags and not 0 < tags_per_class <= n_tags:
        raise ConfigError("tags_per_class must lie in [1, n_tags]")
    n_gauss = n_parties - 1 if n_tags else n_parties
    centers_rng = np.random.default_rng(seed if centers_seed is None else centers_seed)
    means = centers_rng.normal(0.0, separation, size=(num_classes, n_gauss * d_per_party))
    tag_prob = np.full((num_classes, n_tags), tag_off)
    for c in range(num_classes if n_tags else 0):
        tag_prob[c, centers_rng.choice(n_tags, tags_per_class, replace=False)] = tag_on

    rng = np.random.default_rng([seed, n])
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    x = means[labels] + rng.normal(size=(n, n_gauss * d_per_party))
    blocks = [x[:, k * d_per_party:(k + 1) * d_per_party] for k in range(n_gauss)]
    if n_tags:
        blocks.append((rng.random((n, n_tags)) < tag_prob[labels]).astype(np.float64))
    n_poison = int(round(poison_fraction * n))
    poison = np.sort(rng.choice(n, n_poison, replace=False))
    trigger = np.zeros((n, 1))
    trigger[poison] = 1.0
    blocks[-1] = np.hstack([blocks[-1], trigger])
    return PartitionedDataset(blocks, labels, num_classes, poison, split=split)


def synth_datasets(n_train: int = 10000, n_test: int = 2000, seed: int = 0,
                   **kwargs) -> tuple[PartitionedDataset, PartitionedDataset]:
    train = synth_generate(n_train, seed=seed, centers_seed=seed, split="train", **kwargs)
    test = synth_generate(n_test, seed=seed + 7919, centers_seed=seed, split="test", **kwargs)
    return train, test
