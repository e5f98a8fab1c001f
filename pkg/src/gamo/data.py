"""Dataset construction, ingestion, imbalancing, and splitting.

A Dataset always keeps its classes relabeled in ascending order of size, so
index 0 is the rarest class and index c-1 the majority. All constructors
funnel through ``Dataset.from_labeled`` which enforces that ordering.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed input file (bad magic, ragged rows, label gaps, ...)."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix + labels with per-class row index sets and priors.

    Invariants: ``class_index`` partitions the rows, ``priors[i]`` equals
    ``len(class_index[i]) / n``, and class sizes are non-decreasing in the
    class id (the majority class is always ``class_count - 1``).
    """

    features: np.ndarray
    labels: np.ndarray
    class_index: tuple[np.ndarray, ...]
    priors: np.ndarray
    class_count: int

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.class_index])

    def class_features(self, i: int) -> np.ndarray:
        return self.features[self.class_index[i]]

    @staticmethod
    def from_labeled(features: np.ndarray, labels: np.ndarray) -> "Dataset":
        """Build a Dataset, relabeling classes ascending by size.

        Labels must be integers 0..c-1 with every class present; ties in
        size keep their original relative order, so an already-ordered
        labeling passes through unchanged.
        """
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be 1-D with one entry per feature row")
        if labels.size == 0:
            raise ValueError("empty dataset")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == labels.astype(np.int64)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise ValueError("labels must be non-negative")
        c = int(labels.max()) + 1
        counts = np.bincount(labels, minlength=c)
        if np.any(counts == 0):
            missing = np.flatnonzero(counts == 0).tolist()
            raise DataFormatError(f"label gap: no samples for class(es) {missing}")
        order = sorted(range(c), key=lambda k: (counts[k], k))
        remap = np.empty(c, dtype=np.int64)
        for new, old in enumerate(order):
            remap[old] = new
        new_labels = remap[labels]
        class_index = tuple(np.flatnonzero(new_labels == i) for i in range(c))
        priors = np.array([len(ix) / labels.size for ix in class_index])
        features.setflags(write=False)
        new_labels.setflags(write=False)
        return Dataset(features, new_labels, class_index, priors, c)


def imbalance_ratio(data: Dataset) -> float:
    """Largest class count divided by smallest."""
    counts = data.class_counts()
    return counts.max() / counts.min()


@dataclass(frozen=True)
class ImbalanceSpec:
    """Per-class training counts, test points per class, and the draw seed."""

    counts: tuple[int, ...]
    test_per_class: int
    seed: int

    def __post_init__(self):
        if any(c <= 0 for c in self.counts):
            raise ValueError(f"per-class counts must be positive, got {self.counts}")
        if self.test_per_class < 0:
            raise ValueError("test_per_class must be non-negative")


# ---------------------------------------------------------------------------
# Gaussian toy data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianComponent:
    mean: tuple[float, ...]
    cov: object = 1.0  # scalar, diagonal vector, or full matrix
    weight: float = 1.0

    def cov_matrix(self) -> np.ndarray:
        d = len(self.mean)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = np.eye(d) * float(cov)
        elif cov.ndim == 1:
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {d}")
        return cov


ClassGeometry = list[GaussianComponent]


def make_gaussian_toy(spec: ImbalanceSpec, geometry: list[ClassGeometry]) -> Dataset:
    """Sample a mixture-of-Gaussians dataset with spec.counts points per class.

    Multi-component classes (e.g. a ring of blobs) give non-convex shapes.
    Deterministic given spec.seed.
    """
    if len(geometry) != len(spec.counts):
        raise ValueError("geometry needs one component list per class")
    rng = np.random.default_rng(spec.seed)
    rows = []
    labels = []
    for class_id, components in enumerate(geometry):
        if not components:
            raise ValueError(f"class {class_id} has no mixture components")
        weights = np.array([c.weight for c in components], dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError("component weights must be positive")
        weights = weights / weights.sum()
        chols = []
        for comp in components:
            cov = comp.cov_matrix()
            try:
                chols.append(np.linalg.cholesky(cov))
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    f"degenerate covariance for class {class_id}: {exc}") from exc
        count = spec.counts[class_id]
        comp_ids = rng.choice(len(components), size=count, p=weights)
        z = rng.standard_normal(size=(count, len(components[0].mean)))
        x = np.empty_like(z)
        for k, comp in enumerate(components):
            pick = comp_ids == k
            x[pick] = np.asarray(comp.mean) + z[pick] @ chols[k].T
        rows.append(x)
        labels.append(np.full(count, class_id, dtype=np.int64))
    return Dataset.from_labeled(np.concatenate(rows), np.concatenate(labels))


# ---------------------------------------------------------------------------
# IDX and CSV ingestion
# ---------------------------------------------------------------------------

def _read_be_header(raw: bytes, n_fields: int, path) -> tuple[int, ...]:
    need = 4 * n_fields
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated header")
    return struct.unpack(f">{n_fields}i", raw[:need])


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair: big-endian extents, pixels scaled to [0,1],
    images flattened row-major to rows*cols features."""
    img_raw = Path(images_path).read_bytes()
    lab_raw = Path(labels_path).read_bytes()

    magic, count, rows, cols = _read_be_header(img_raw, 4, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(f"{images_path}: bad image magic 0x{magic:08x}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    if pixels.size != count * rows * cols:
        raise DataFormatError(
            f"{images_path}: expected {count * rows * cols} pixels, found {pixels.size}")

    lmagic, lcount = _read_be_header(lab_raw, 2, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise DataFormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    labels = np.frombuffer(lab_raw, dtype=np.uint8, offset=8)
    if labels.size != lcount:
        raise DataFormatError(f"{labels_path}: expected {lcount} labels, found {labels.size}")
    if count != lcount:
        raise DataFormatError(
            f"image/label count mismatch: {count} images vs {lcount} labels")

    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    return Dataset.from_labeled(features, labels.astype(np.int64))


def _parse_number(cell: str) -> float:
    try:
        return float(cell)
    except ValueError as exc:
        raise DataFormatError(f"non-numeric cell {cell!r}") from exc


def load_csv(path) -> Dataset:
    """Load label-first CSV rows (label, f1..fD); a non-numeric first row is
    treated as a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [row for row in reader if row]
    if rows:
        try:
            for cell in rows[0]:
                float(cell)
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    width = len(rows[0])
    if width < 2:
        raise DataFormatError(f"{path}: rows need a label plus at least one feature")
    labels = np.empty(len(rows), dtype=np.int64)
    features = np.empty((len(rows), width - 1), dtype=np.float64)
    for r, row in enumerate(rows):
        if len(row) != width:
            raise DataFormatError(
                f"{path}: ragged row {r}: {len(row)} cells, expected {width}")
        lab = _parse_number(row[0])
        if lab != int(lab) or lab < 0:
            raise DataFormatError(f"{path}: row {r}: label must be a non-negative integer")
        labels[r] = int(lab)
        for j, cell in enumerate(row[1:]):
            features[r, j] = _parse_number(cell)
    return Dataset.from_labeled(features, labels)


def save_csv(path, data: Dataset) -> None:
    """Write the label-first CSV schema read by load_csv (12 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for row_id in range(data.n):
            cells = [str(int(data.labels[row_id]))]
            cells.extend(format(v, ".12g") for v in data.features[row_id])
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _consistent_pair(train_feats, train_labels, test_feats, test_labels,
                     train_sizes: np.ndarray) -> tuple[Dataset, Dataset]:
    """Relabel both splits by the train split's size ordering so that class
    ids keep meaning across them, then build Datasets (a stable no-op sort)."""
    c = len(train_sizes)
    order = sorted(range(c), key=lambda k: (train_sizes[k], k))
    remap = np.empty(c, dtype=np.int64)
    for new, old in enumerate(order):
        remap[old] = new
    train = Dataset.from_labeled(train_feats, remap[np.asarray(train_labels)])
    test = Dataset.from_labeled(test_feats, remap[np.asarray(test_labels)])
    return train, test


def subsample_imbalanced(full: Dataset, spec: ImbalanceSpec) -> tuple[Dataset, Dataset]:
    """Draw the per-class test points first, then the imbalanced train counts
    from the remainder; disjoint and deterministic given spec.seed."""
    if len(spec.counts) != full.class_count:
        raise ValueError(
            f"spec has {len(spec.counts)} counts for {full.class_count} classes")
    rng = np.random.default_rng(spec.seed)
    train_ids, test_ids = [], []
    train_labels, test_labels = [], []
    for i in range(full.class_count):
        pool = full.class_index[i]
        need = spec.counts[i] + spec.test_per_class
        if len(pool) < need:
            raise ValueError(
                f"class {i} has {len(pool)} points, needs {need} "
                f"({spec.test_per_class} test + {spec.counts[i]} train)")
        perm = rng.permutation(pool)
        test_ids.append(perm[:spec.test_per_class])
        train_ids.append(perm[spec.test_per_class:need])
        test_labels.append(np.full(spec.test_per_class, i, dtype=np.int64))
        train_labels.append(np.full(spec.counts[i], i, dtype=np.int64))
    train_rows = np.concatenate(train_ids)
    test_rows = np.concatenate(test_ids)
    return _consistent_pair(
        full.features[train_rows], np.concatenate(train_labels),
        full.features[test_rows], np.concatenate(test_labels),
        np.asarray(spec.counts))


def stratified_split(data: Dataset, fraction: float, seed: int,
                     min_per_class: int = 1) -> tuple[Dataset, Dataset]:
    """Split off a stratified holdout (at least min_per_class rows per class).

    Returns (rest, holdout). Class ids keep their meaning across the pair.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    hold_rows, rest_rows = [], []
    hold_labels, rest_labels = [], []
    rest_sizes = np.empty(data.class_count, dtype=np.int64)
    for i in range(data.class_count):
        pool = data.class_index[i]
        k = max(min_per_class, int(round(fraction * len(pool))))
        if k >= len(pool):
            raise ValueError(
                f"class {i} has only {len(pool)} rows; cannot hold out {k}")
        perm = rng.permutation(pool)
        hold_rows.append(perm[:k])
        rest_rows.append(perm[k:])
        hold_labels.append(np.full(k, i, dtype=np.int64))
        rest_labels.append(np.full(len(pool) - k, i, dtype=np.int64))
        rest_sizes[i] = len(pool) - k
    rest, hold = _consistent_pair(
        data.features[np.concatenate(rest_rows)], np.concatenate(rest_labels),
        data.features[np.concatenate(hold_rows)], np.concatenate(hold_labels),
        rest_sizes)
    return rest, hold


def build_toy_split(geometry: list[ClassGeometry], counts: list[int],
                    test_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Generate a toy pool (train + test points per class) and split it.

    counts[i] pairs with geometry[i]; the pool relabels classes by size, so
    the subsample counts are reordered to stay aligned.
    """
    pool_counts = [c + test_per_class for c in counts]
    pool = make_gaussian_toy(
        ImbalanceSpec(tuple(pool_counts), 0, seed), geometry)
    order = sorted(range(len(counts)), key=lambda k: (pool_counts[k], k))
    sorted_counts = tuple(counts[k] for k in order)
    return subsample_imbalanced(
        pool, ImbalanceSpec(sorted_counts, test_per_class, seed + 1))


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Zero-mean unit-variance scaling fit on the train features and applied
    to every given dataset; constant columns are left centered only."""
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)

    def apply(ds: Dataset) -> Dataset:
        scaled = (ds.features - mean) / std
        scaled.setflags(write=False)
        return Dataset(scaled, ds.labels, ds.class_index, ds.priors, ds.class_count)

    return tuple(apply(ds) for ds in (train, *others))
