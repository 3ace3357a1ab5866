"""Labeled feature datasets: synthetic Gaussian mixtures, delimited files, class splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or insufficient data."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_index: tuple[np.ndarray, ...]
    original_labels: tuple[int, ...] = ()
    metadata: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_arrays(cls, features, labels, metadata: dict | None = None) -> "LabeledDataset":
        """Build a dataset, remapping labels to a dense ``[0, n_classes)`` range."""
        x = np.asarray(features, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError(f"features must be [n, d] with one label per row, got {x.shape} and {y.shape}")
        original, dense = np.unique(y, return_inverse=True)
        class_index = tuple(np.flatnonzero(dense == c) for c in range(len(original)))
        x.setflags(write=False)
        dense = dense.astype(np.int64)
        dense.setflags(write=False)
        return cls(x, dense, class_index, tuple(int(v) for v in original), dict(metadata or {}))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_index)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int
    dim: int
    samples_per_class: int
    center_scale: float = 1.0
    within_std: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 2:
            raise DataError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.dim < 1:
            raise DataError(f"dim must be >= 1, got {self.dim}")
        if self.samples_per_class < 1:
            raise DataError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.within_std > 0:
            raise DataError(f"within_std must be > 0, got {self.within_std}")


@dataclass(frozen=True)
class ClassSplit:
    train_classes: tuple[int, ...]
    val_classes: tuple[int, ...]
    test_classes: tuple[int, ...]


def generate_gaussian_mixture(spec: SyntheticSpec) -> LabeledDataset:
    """Isotropic Gaussian classes around centers drawn uniformly from a cube."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(-spec.center_scale, spec.center_scale, size=(spec.n_classes, spec.dim))
    noise = rng.standard_normal((spec.n_classes, spec.samples_per_class, spec.dim))
    x = (centers[:, None, :] + spec.within_std * noise).reshape(-1, spec.dim)
    y = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    return LabeledDataset.from_arrays(x, y, {"source": "synthetic", "centers": centers})


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_delimited(path: str | Path, delimiter: str = ",") -> LabeledDataset:
    """Read rows of ``d`` real features followed by an integer label.

    A non-numeric first row is treated as a header and skipped.
    """
    rows: list[list[str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh, delimiter=delimiter):
            rows.append([c.strip() for c in row])
    lines = [(i + 1, r) for i, r in enumerate(rows) if r and any(r)]
    if lines and not all(_is_number(c) for c in lines[0][1]):
        lines = lines[1:]
    if not lines:
        raise DataError(f"{path}: no data rows")
    width = len(lines[0][1])
    if width < 2:
        raise DataError(f"{path}: row {lines[0][0]} needs at least one feature and a label")
    feats, labels = [], []
    for lineno, row in lines:
        if len(row) != width:
            raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {width}")
        try:
            feats.append([float(c) for c in row[:-1]])
        except ValueError:
            raise DataError(f"{path}: row {lineno} has a non-numeric feature") from None
        try:
            label = int(row[-1])
        except ValueError:
            raise DataError(f"{path}: row {lineno} has a non-integer label {row[-1]!r}") from None
        if label < 0:
            raise DataError(f"{path}: row {lineno} has negative label {label}")
        labels.append(label)
    return LabeledDataset.from_arrays(feats, labels, {"source": str(path)})


def write_delimited(dataset: LabeledDataset, path: str | Path, delimiter: str = ",") -> None:
    d = dataset.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def split_classes(
    dataset: LabeledDataset,
    fractions: tuple[float, float, float],
    seed: int,
    allow_empty: bool = False,
) -> ClassSplit:
    """Shuffle classes by ``seed`` and cut them into train/val/test parts.

    Val and test sizes are rounded; train takes the remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise DataError(f"fractions must be three nonnegative numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")
    n = dataset.n_classes
    n_val = int(round(fractions[1] * n))
    n_test = int(round(fractions[2] * n))
    n_train = n - n_val - n_test
    sizes = (n_train, n_val, n_test)
    for name, size, frac in zip(("train", "val", "test"), sizes, fractions):
        if size < 0 or (size == 0 and not allow_empty):
            raise DataError(
                f"{n} classes are too few for fractions {fractions}: {name} part would have {size} classes"
            )
        if size == 0 and frac > 0:
            raise DataError(f"{n} classes are too few: {name} fraction {frac} rounds to zero classes")
    order = np.random.default_rng(seed).permutation(n)
    train = tuple(sorted(int(c) for c in order[:n_train]))
    val = tuple(sorted(int(c) for c in order[n_train : n_train + n_val]))
    test = tuple(sorted(int(c) for c in order[n_train + n_val :]))
    return ClassSplit(train, val, test)
