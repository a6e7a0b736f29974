"""
Desk-scale datasets.

Every source yields features scaled into [0, 1] and integer labels; splits are disjoint and fully
determined by the DatasetSpec seed.
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Tuple

import numpy as np
import pandas as pd
from sklearn.datasets import make_blobs, make_moons
from sklearn.preprocessing import minmax_scale

from .exceptions import ConfigurationError, DatasetParseError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 6x6 glyphs placed with a random offset inside an 8x8 canvas
_GLYPHS = [
    [".####.", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["..##..", ".###..", "..##..", "..##..", "..##..", ".####."],
    [".####.", "#....#", "....#.", "..##..", ".#....", "######"],
    ["#####.", ".....#", "..###.", ".....#", ".....#", "#####."],
    ["#...#.", "#...#.", "######", "....#.", "....#.", "....#."],
    ["######", "#.....", "#####.", ".....#", ".....#", "#####."],
    [".####.", "#.....", "#####.", "#....#", "#....#", ".####."],
    ["######", "....#.", "...#..", "..#...", "..#...", "..#..."],
    [".####.", "#....#", ".####.", "#....#", "#....#", ".####."],
    [".####.", "#....#", ".#####", ".....#", "....#.", ".###.."],
]
DIGIT_SIZE = 8


class DataSource(str, Enum):
    DIGITS = "digits"
    BLOBS = "blobs"
    MOONS = "moons"
    CSV = "csv"
    IDX = "idx"


@dataclass
class DatasetSpec:
    source: DataSource = DataSource.DIGITS
    classes: int = 10
    dim: int = 2
    separation: float = 3.0
    n: int = 600
    noise: float = 0.1
    path: str = ""
    feature_columns: List[str] = field(default_factory=list)
    label_column: str = "label"
    images_path: str = ""
    labels_path: str = ""
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    normalize: bool = True
    seed: int = 0

    def __post_init__(self):
        self.source = DataSource(self.source)
        if self.classes < 2:
            raise ConfigurationError(f"dataset.classes must be at least 2, got {self.classes}")
        if self.source is DataSource.DIGITS and self.classes > len(_GLYPHS):
            raise ConfigurationError(f"dataset.classes is at most {len(_GLYPHS)} for digits")
        if self.dim < 1 or self.n < 1:
            raise ConfigurationError("dataset.dim and dataset.n must be positive")
        if self.noise < 0 or self.separation < 0:
            raise ConfigurationError("dataset.noise and dataset.separation must be non-negative")
        if not (0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1):
            raise ConfigurationError(
                "dataset.val_fraction and dataset.test_fraction must lie in [0, 1)"
            )
        if self.val_fraction + self.test_fraction >= 1:
            raise ConfigurationError("dataset.val_fraction + dataset.test_fraction must be below 1")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    num_classes: int
    input_shape: Tuple[int, ...]

    def split(self, name: str) -> Split:
        if name not in ("train", "val", "test"):
            raise ConfigurationError(f"unknown split {name!r}; expected train, val or test")
        return getattr(self, name)


def generate_digits(n: int, classes: int = 10, noise: float = 0.1, seed: int = 0):
    """Procedural 8x8 digit images with random offset, contrast and pixel noise."""
    rng = np.random.default_rng(seed)
    glyphs = np.array([[[c == "#" for c in row] for row in g] for g in _GLYPHS[:classes]], float)
    labels = rng.integers(0, classes, size=n)
    offsets = rng.integers(0, DIGIT_SIZE - 6 + 1, size=(n, 2))
    contrast = rng.uniform(0.6, 1.0, size=n)
    images = np.zeros((n, 1, DIGIT_SIZE, DIGIT_SIZE))
    for i, (label, (dy, dx)) in enumerate(zip(labels, offsets)):
        images[i, 0, dy : dy + 6, dx : dx + 6] = contrast[i] * glyphs[label]
    images += noise * rng.standard_normal(images.shape)
    return np.clip(images, 0.0, 1.0), labels.astype(np.int64)


def blob_centers(classes: int, dim: int, separation: float) -> np.ndarray:
    """Centers on a circle (a line for dim=1) with neighbouring centers separation apart."""
    centers = np.zeros((classes, dim))
    if dim == 1:
        centers[:, 0] = separation * np.arange(classes)
        return centers
    radius = separation / (2 * np.sin(np.pi / classes))
    angles = 2 * np.pi * np.arange(classes) / classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def read_csv_dataset(path: str, feature_columns: List[str], label_column: str):
    """Read features and labels from a CSV file with a header row."""
    csv_path = Path(path)
    if not csv_path.is_file():
        raise ConfigurationError(f"dataset.path: file not found: {path}")
    try:
        frame = pd.read_csv(csv_path)
    except pd.errors.EmptyDataError:
        raise DatasetParseError("CSV file is empty", path, "line 1") from None
    except pd.errors.ParserError as e:
        raise DatasetParseError(f"malformed CSV: {e}", path) from None
    if label_column not in frame.columns:
        raise DatasetParseError(
            f"label column {label_column!r} missing from header", path, "line 1"
        )
    columns = feature_columns or [c for c in frame.columns if c != label_column]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DatasetParseError(f"feature columns {missing} missing from header", path, "line 1")

    values = frame[columns + [label_column]].apply(pd.to_numeric, errors="coerce")
    bad = values.isna().any(axis=1).to_numpy()
    if bad.any():
        # header is line 1
        line = int(np.argmax(bad)) + 2
        raise DatasetParseError("non-numeric or missing value", path, f"line {line}")
    labels = values[label_column].to_numpy()
    fractional = labels != np.round(labels)
    if fractional.any() or (labels < 0).any():
        row = int(np.argmax(fractional | (labels < 0)))
        raise DatasetParseError("labels must be non-negative integers", path, f"line {row + 2}")
    return values[columns].to_numpy(dtype=np.float64), labels.astype(np.int64)


def _read_idx(path: str, magic: int, what: str) -> np.ndarray:
    idx_path = Path(path)
    if not idx_path.is_file():
        raise ConfigurationError(f"dataset.{what}_path: file not found: {path}")
    data = idx_path.read_bytes()
    if len(data) < 4:
        raise DatasetParseError("truncated IDX header", path, "offset 0")
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise DatasetParseError(
            f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}", path, "offset 0"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetParseError("truncated IDX dimensions", path, f"offset {len(data)}")
    dims = tuple(int(d) for d in np.frombuffer(data[4:header], dtype=">u4"))
    expected = header + int(np.prod(dims))
    if len(data) != expected:
        raise DatasetParseError(
            f"IDX payload has {len(data) - header} bytes, "
            f"dimensions {dims} need {expected - header}",
            path,
            f"offset {min(len(data), expected)}",
        )
    return np.frombuffer(data[header:], dtype=np.uint8).reshape(dims)


def read_idx_pair(images_path: str, labels_path: str):
    """Images (N, 1, H, W) scaled by 1/255 and labels (N,) from an IDX pair."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise DatasetParseError(
            f"{len(images)} images but {len(labels)} labels", labels_path, "offset 4"
        )
    return images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64)


def split_indices(n: int, val_fraction: float, test_fraction: float, seed: int):
    """Disjoint (train, val, test) index arrays from one seeded permutation."""
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    return order[n_test + n_val :], order[n_test : n_test + n_val], order[:n_test]


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Generate or read the dataset and split it."""
    source = spec.source
    if source is DataSource.DIGITS:
        x, y = generate_digits(spec.n, spec.classes, spec.noise, spec.seed)
    elif source is DataSource.BLOBS:
        centers = blob_centers(spec.classes, spec.dim, spec.separation)
        x, y = make_blobs(
            n_samples=spec.n, centers=centers, cluster_std=1.0, random_state=spec.seed
        )
    elif source is DataSource.MOONS:
        x, y = make_moons(n_samples=spec.n, noise=spec.noise, random_state=spec.seed)
    elif source is DataSource.CSV:
        x, y = read_csv_dataset(spec.path, spec.feature_columns, spec.label_column)
    else:
        x, y = read_idx_pair(spec.images_path, spec.labels_path)

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if spec.normalize and source in (DataSource.BLOBS, DataSource.MOONS, DataSource.CSV) and len(x):
        x = np.clip(minmax_scale(x, feature_range=(0.0, 1.0)), 0.0, 1.0)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise InputError("dataset features lie outside [0, 1]; set dataset.normalize=true")

    num_classes = int(y.max()) + 1 if len(y) else spec.classes
    if source in (DataSource.DIGITS, DataSource.BLOBS):
        num_classes = spec.classes
    elif source is DataSource.MOONS:
        num_classes = 2

    train, val, test = split_indices(len(y), spec.val_fraction, spec.test_fraction, spec.seed)
    return Dataset(
        train=Split(x[train], y[train]),
        val=Split(x[val], y[val]),
        test=Split(x[test], y[test]),
        num_classes=num_classes,
        input_shape=tuple(x.shape[1:]),
    )
