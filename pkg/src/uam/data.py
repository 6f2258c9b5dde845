"""Radiomics CSV ingestion, feature standardization, individual-level
splitting, and synthetic dataset generation.

CSV contract: UTF-8, comma-separated, first row header with columns
``cell_id,image_id,individual_id,label`` followed by the feature columns;
decimal-point floats. Ingestion is a single-pass row stream; rows containing
non-finite features are dropped and counted.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

REQUIRED_COLUMNS = ("cell_id", "image_id", "individual_id", "label")


class DataError(ValueError):
    """Malformed input data (missing columns, inconsistent widths, unknown labels)."""


@dataclass
class CellRecord:
    cell_id: str
    image_id: str
    individual_id: str
    label: str
    features: np.ndarray


@dataclass
class Dataset:
    cell_ids: list
    image_ids: list
    individual_ids: list
    labels: np.ndarray          # [N] class indices into label_names
    label_names: list
    features: np.ndarray        # [N, F]
    feature_names: list
    dropped_count: int = 0

    def __len__(self) -> int:
        return len(self.cell_ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def record(self, i: int) -> CellRecord:
        return CellRecord(
            cell_id=self.cell_ids[i],
            image_id=self.image_ids[i],
            individual_id=self.individual_ids[i],
            label=self.label_names[self.labels[i]],
            features=self.features[i],
        )


def load_csv(path, label_vocab: list | None = None) -> Dataset:
    """Stream-parse a radiomics CSV into a Dataset.

    The label vocabulary is inferred (sorted unique) and frozen unless
    ``label_vocab`` is given, in which case unknown labels are a DataError.
    """
    cell_ids, image_ids, individual_ids, raw_labels = [], [], [], []
    rows = []
    dropped = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header[:4]) != REQUIRED_COLUMNS:
            raise DataError(
                f"{path}: header must start with {','.join(REQUIRED_COLUMNS)}, got {header[:4]}"
            )
        feature_names = header[4:]
        n_feat = len(feature_names)
        if n_feat == 0:
            raise DataError(f"{path}: no feature columns")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4 + n_feat:
                raise DataError(f"{path}:{lineno}: expected {4 + n_feat} columns, got {len(row)}")
            try:
                feats = np.array([float(v) for v in row[4:]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
            if not np.all(np.isfinite(feats)):
                dropped += 1
                continue
            cell_ids.append(row[0])
            image_ids.append(row[1])
            individual_ids.append(row[2])
            raw_labels.append(row[3])
            rows.append(feats)

    if label_vocab is None:
        label_names = sorted(set(raw_labels))
    else:
        label_names = list(label_vocab)
        unknown = set(raw_labels) - set(label_names)
        if unknown:
            raise DataError(f"{path}: labels {sorted(unknown)} not in the frozen vocabulary")
    index = {name: i for i, name in enumerate(label_names)}
    labels = np.array([index[l] for l in raw_labels], dtype=np.int64)
    features = np.stack(rows) if rows else np.zeros((0, n_feat))
    return Dataset(
        cell_ids=cell_ids,
        image_ids=image_ids,
        individual_ids=individual_ids,
        labels=labels,
        label_names=label_names,
        features=features,
        feature_names=feature_names,
        dropped_count=dropped,
    )


def write_csv(ds: Dataset, path) -> None:
    """Inverse of load_csv; floats use repr-exact %.17g formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(REQUIRED_COLUMNS) + list(ds.feature_names))
        for i in range(len(ds)):
            writer.writerow(
                [ds.cell_ids[i], ds.image_ids[i], ds.individual_ids[i], ds.label_names[ds.labels[i]]]
                + ["%.17g" % v for v in ds.features[i]]
            )


# -- individual-level splitting ---------------------------------------------------

@dataclass
class SplitSpec:
    train_individuals: set
    test_individuals: set
    ratio: float = 0.8


def split_by_individual(ds: Dataset, ratio: float = 0.8, seed: int = 0) -> SplitSpec:
    """Shuffle individuals by seed and assign them greedily to train until
    the train cell-count fraction first reaches ``ratio``. No individual
    straddles the split and both sides stay nonempty."""
    uniq = sorted(set(ds.individual_ids))
    if len(uniq) < 2:
        raise DataError(f"need >= 2 individuals to split, got {len(uniq)}")
    counts = {}
    for ind in ds.individual_ids:
        counts[ind] = counts.get(ind, 0) + 1
    order = [uniq[i] for i in np.random.default_rng(seed).permutation(len(uniq))]
    total = len(ds)
    train = []
    cells = 0
    for ind in order:
        if train and cells / total >= ratio:
            break
        if len(train) == len(order) - 1:
            break
        train.append(ind)
        cells += counts[ind]
    train_set = set(train)
    return SplitSpec(train_individuals=train_set, test_individuals=set(uniq) - train_set, ratio=ratio)


def subset_by_individuals(ds: Dataset, individuals: set) -> Dataset:
    keep = [i for i, ind in enumerate(ds.individual_ids) if ind in individuals]
    return Dataset(
        cell_ids=[ds.cell_ids[i] for i in keep],
        image_ids=[ds.image_ids[i] for i in keep],
        individual_ids=[ds.individual_ids[i] for i in keep],
        labels=ds.labels[keep],
        label_names=list(ds.label_names),
        features=ds.features[keep],
        feature_names=list(ds.feature_names),
        dropped_count=0,
    )


# -- synthetic data -----------------------------------------------------------------

def synthesize_dataset(
    n_individuals: int,
    cells_per_individual: int,
    n_features: int = 106,
    n_classes: int = 2,
    difficulty: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Class-conditional synthetic radiomics generator.

    Each class gets a random mean vector (with a shared per-class shift so
    the classes separate cleanly at difficulty 0) and a covariance scale;
    individuals carry their own offset, and every feature keeps a
    class-independent base level (radiomics columns have characteristic
    scales). Two latent bits are planted along unit directions supported on
    disjoint feature groups at the two ends of the schema, so recovering the
    rule requires relating distant positions of the token sequence.
    ``difficulty`` in [0, 1] shrinks the class-mean signal and relabels that
    fraction of cells by the XOR (mod-k combination) of the two bits — a
    product-of-groups signal no linear model can fit. Deterministic per seed.
    """
    if min(n_individuals, cells_per_individual, n_features, n_classes) < 1:
        raise DataError("all synthesis counts must be >= 1")
    rng = np.random.default_rng(seed)
    k, F = n_classes, n_features
    base = rng.normal(0.0, 1.5, size=F)
    shift = (np.arange(k) - (k - 1) / 2.0) * 2.0
    means = shift[:, None] * 1.2 + rng.normal(0.0, 1.5, size=(k, F))
    scales = rng.uniform(0.5, 1.0, size=k)
    quarter = max(1, F // 4)
    u = np.zeros(F)
    v = np.zeros(F)
    u[:quarter] = rng.normal(0.0, 1.0, size=quarter)
    u /= np.linalg.norm(u)
    lo = max(quarter, F - quarter)
    if lo < F:
        v[lo:] = rng.normal(0.0, 1.0, size=F - lo)
    if not np.linalg.norm(v):
        v[F - 1] = 1.0  # degenerate tiny-F fallback
    v /= np.linalg.norm(v)
    bit_amp = 2.5
    lin_scale = 1.0 - difficulty

    cell_ids, image_ids, individual_ids = [], [], []
    labels = np.zeros(n_individuals * cells_per_individual, dtype=np.int64)
    feats = np.zeros((n_individuals * cells_per_individual, F))
    row = 0
    for ind in range(n_individuals):
        offset = rng.normal(0.0, 0.3, size=F)
        for c in range(cells_per_individual):
            cls = int(rng.integers(k))
            a, b = int(rng.integers(2)), int(rng.integers(2))
            x = base + lin_scale * means[cls] + offset + scales[cls] * rng.standard_normal(F)
            x += bit_amp * ((2 * a - 1) * u + (2 * b - 1) * v)
            label = cls
            if difficulty > 0 and rng.random() < difficulty:
                label = (a + b) % 2 if k == 2 else (2 * a + b) % k
            cell_ids.append(f"cell{row:06d}")
            image_ids.append(f"img{ind:04d}_{c // 64:02d}")
            individual_ids.append(f"ind{ind:04d}")
            labels[row] = label
            feats[row] = x
            row += 1
    return Dataset(
        cell_ids=cell_ids,
        image_ids=image_ids,
        individual_ids=individual_ids,
        labels=labels,
        label_names=[f"class_{i}" for i in range(k)],
        features=feats,
        feature_names=[f"f{i:03d}" for i in range(F)],
        dropped_count=0,
    )


# -- standardization --------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray  # floored at 1e-8

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


def fit_standardizer(features: np.ndarray) -> Standardizer:
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-8)
    return Standardizer(mean=mean, std=std)


def standardize(train: Dataset, test: Dataset | None = None):
    """Fit on the train split only; apply the same affine map to test.

    Returns (standardizer, train_features, test_features_or_None).
    """
    scaler = fit_standardizer(train.features)
    train_f = scaler.apply(train.features)
    test_f = scaler.apply(test.features) if test is not None else None
    return scaler, train_f, test_f
