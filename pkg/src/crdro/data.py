"""Datasets, CSV ingestion, imbalanced Gaussian-cluster generator and batch sampling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Per-class sampling ratios of the imbalanced ten-class benchmark.
BENCHMARK_RATIOS = (0.804, 0.543, 0.997, 0.593, 0.390, 0.285, 0.959, 0.806, 0.967, 0.660)


class DataError(ValueError):
    pass


class EmptyFileError(DataError):
    pass


class RaggedRowError(DataError):
    pass


class NonNumericError(DataError):
    pass


class MissingColumnError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    """N samples with features, integer labels, P0 weights and group ids."""

    features: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = field(default=None)
    group_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim == 1:
            feats = feats[:, None]
        labels = np.asarray(self.labels).astype(np.int64)
        n = feats.shape[0]
        if n < 1:
            raise DataError("dataset needs at least one sample")
        if labels.shape != (n,):
            raise DataError(f"labels shape {labels.shape} does not match N={n}")
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite entries")
        weights = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, dtype=float)
        if weights.shape != (n,) or np.any(weights < 0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-10):
            raise DataError("weights must be a probability vector of length N")
        groups = labels.copy() if self.group_ids is None else np.asarray(self.group_ids).astype(np.int64)
        if groups.shape != (n,):
            raise DataError("group_ids must have length N")
        for name, arr in (("features", feats), ("labels", labels), ("weights", weights), ("group_ids", groups)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        w = self.weights[idx]
        return Dataset(self.features[idx], self.labels[idx], w / w.sum(), self.group_ids[idx])

    def expectation(self, values) -> float:
        """P0-expectation of a per-sample quantity."""
        return float(self.weights @ np.asarray(values, dtype=float))


def load_csv(path, label_column: str) -> Dataset:
    """Read a headed, comma-separated numeric file; every non-label column is a feature."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise EmptyFileError(f"{path}: file is empty")
    header, body = rows[0], rows[1:]
    if label_column not in header:
        raise MissingColumnError(f"{path}: no column named {label_column!r} in header {header}")
    if not body:
        raise EmptyFileError(f"{path}: header present but no data rows")
    li = header.index(label_column)
    feats, labels = [], []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise RaggedRowError(f"{path}:{lineno}: expected {len(header)} cells, found {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError as exc:
            raise NonNumericError(f"{path}:{lineno}: {exc}") from None
        lab = vals[li]
        if lab != int(lab):
            raise NonNumericError(f"{path}:{lineno}: label {row[li]!r} is not an integer")
        labels.append(int(lab))
        feats.append(vals[:li] + vals[li + 1:])
    return Dataset(np.array(feats, dtype=float).reshape(len(body), len(header) - 1), np.array(labels))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_centers(classes: int, d: int, separation: float, center_seed: int = 0) -> np.ndarray:
    """Cluster means on the sphere of radius ``separation``.

    Up to 2d classes sit on +-e_i; beyond that the directions are random.
    """
    if classes <= 2 * d:
        dirs = np.zeros((classes, d))
        for c in range(classes):
            dirs[c, c // 2] = 1.0 if c % 2 == 0 else -1.0
    else:
        rng = np.random.default_rng(center_seed)
        dirs = rng.standard_normal((classes, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return separation * dirs


def gen_imbalanced(classes: int, per_class_ratios=None, base_n: int = 500, d: int = 5,
                   separation: float = 2.0, seed: int = 0) -> Dataset:
    """Unit-covariance Gaussian clusters; class c gets round(base_n * ratio_c) points.

    Rounding is half-up, so 271.5 -> 272. Labels are 0..classes-1 and double as
    group ids.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    ratios = BENCHMARK_RATIOS[:classes] if per_class_ratios is None else tuple(per_class_ratios)
    if len(ratios) != classes:
        raise DataError(f"expected {classes} ratios, got {len(ratios)}")
    if any(not (0 < r <= 1) for r in ratios):
        raise DataError("ratios must lie in (0, 1]")
    counts = [round_half_up(base_n * r) for r in ratios]
    if min(counts) < 1:
        raise DataError("every class needs at least one sample")
    centers = class_centers(classes, d, separation)
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for c, m in enumerate(counts):
        feats.append(centers[c] + rng.standard_normal((m, d)))
        labels.append(np.full(m, c))
    return Dataset(np.vstack(feats), np.concatenate(labels))


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for a named purpose derived from the master seed."""
    key = {"x_batch": 0, "z_batch": 1, "init": 2, "data": 3, "eval": 4}.get(stream)
    if key is None:
        key = int.from_bytes(stream.encode(), "little") % (2**32)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def sample_batch(dataset: Dataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. indices drawn from P0 with replacement."""
    if n < 1:
        raise ValueError("batch size must be >= 1")
    if dataset.is_uniform:
        return rng.integers(0, dataset.n, size=n)
    return rng.choice(dataset.n, size=n, replace=True, p=dataset.weights)
