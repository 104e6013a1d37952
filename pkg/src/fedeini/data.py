"""Dataset ingestion, synthetic credit-style data, and vertical splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import expit

from .model import VerticalPartition

CREDIT_FEATURE_NAMES = (
    "revolving_utilization",
    "age",
    "num_late_30_59",
    "debt_ratio",
    "monthly_income",
    "num_open_credit_lines",
    "num_late_90",
    "num_real_estate_loans",
    "num_late_60_89",
    "num_dependents",
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D array")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError("labels must align with feature rows")
        if len(self.feature_names) != self.features.shape[1]:
            raise DatasetError("one name per feature column required")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.feature_names)


def ingest_csv(path, label_column: str) -> Dataset:
    """Parse a headered CSV into a typed dataset.

    Rows with blank or non-numeric cells are collected and reported by
    their 1-based line number in the file.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: label column {label_column!r} not in header {header}")
        label_pos = header.index(label_column)
        feature_names = tuple(name for i, name in enumerate(header) if i != label_pos)
        rows, labels, bad = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                bad.append((line_no, f"expected {len(header)} cells, got {len(row)}"))
                continue
            try:
                values = [float(cell) for i, cell in enumerate(row) if i != label_pos]
                label = float(row[label_pos])
            except ValueError:
                offender = next(cell for cell in row if not _parses_as_float(cell))
                bad.append((line_no, f"non-numeric cell {offender!r}"))
                continue
            if label not in (0.0, 1.0):
                bad.append((line_no, f"label {row[label_pos]!r} is not 0/1"))
                continue
            rows.append(values)
            labels.append(int(label))
    if bad:
        shown = "; ".join(f"line {line}: {why}" for line, why in bad[:5])
        more = f" (and {len(bad) - 5} more)" if len(bad) > 5 else ""
        raise DatasetError(f"{path}: {len(bad)} bad row(s): {shown}{more}")
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.asarray(rows, dtype=np.float64),
                   np.asarray(labels, dtype=np.int64), feature_names)


def _parses_as_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def synthetic_credit_dataset(n_samples: int = 5000, n_features: int = 10,
                             seed: int = 0, positive_rate: float = 0.07) -> Dataset:
    """Deterministic credit-scoring-style data: correlated features, a
    nonlinear default score, and a minority positive class."""
    if n_features < 4:
        raise DatasetError("need at least 4 features")
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(n_samples, 4))
    mixing = rng.normal(size=(4, n_features)) * rng.uniform(0.4, 1.2, size=(1, n_features))
    X = latent @ mixing + rng.normal(scale=0.8, size=(n_samples, n_features))
    # give the columns credit-like scales
    X[:, 0] = expit(X[:, 0])                                  # utilization in [0, 1]
    X[:, 1] = np.clip(45 + 12 * X[:, 1], 21, 95).round()      # age
    X[:, 2] = np.maximum(0, X[:, 2] * 1.5).round()            # delinquency count
    X[:, 3] = np.abs(X[:, 3])                                 # debt ratio
    score = (
        2.2 * X[:, 0]
        - 0.035 * X[:, 1]
        + 0.8 * X[:, 2]
        + 0.5 * X[:, 3]
        + 0.9 * (X[:, 0] > 0.7) * X[:, 2]
        + 0.4 * latent[:, 0] * latent[:, 1]
    )
    offset = np.quantile(score, 1.0 - positive_rate)
    labels = rng.binomial(1, expit((score - offset) / 0.6))
    if labels.min() == labels.max():  # tiny draws can come out single-class
        labels[: max(1, n_samples // 20)] = 1 - labels[0]
    names = list(CREDIT_FEATURE_NAMES[:n_features])
    names += [f"extra_{i}" for i in range(len(names), n_features)]
    return Dataset(X, labels.astype(np.int64), tuple(names))


def train_test_split(dataset: Dataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    if not (0.0 < test_fraction < 1.0):
        raise DatasetError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.n_samples)
    n_test = max(1, int(round(dataset.n_samples * test_fraction)))
    return dataset.subset(order[n_test:]), dataset.subset(order[:n_test])


@dataclass(frozen=True)
class FeatureTable:
    """One party's vertical slice: its columns over the shared sample ids."""

    party_id: int
    sample_ids: np.ndarray
    columns: Mapping[int, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "_pos_of",
                           {int(sid): i for i, sid in enumerate(self.sample_ids)})

    @property
    def feature_ids(self) -> list[int]:
        return sorted(self.columns)

    def row(self, sample_id: int) -> dict[int, float]:
        try:
            pos = self._pos_of[int(sample_id)]
        except KeyError:
            raise DatasetError(f"party {self.party_id} has no sample {sample_id}") from None
        return {f: float(col[pos]) for f, col in self.columns.items()}


def vertical_split(dataset: Dataset, partition: VerticalPartition,
                   sample_ids: np.ndarray | None = None) -> dict[int, FeatureTable]:
    """Column-disjoint per-party tables with identical row ordering."""
    partition.validate(dataset.n_features)
    if sample_ids is None:
        sample_ids = np.arange(dataset.n_samples)
    sample_ids = np.asarray(sample_ids)
    if sample_ids.shape != (dataset.n_samples,):
        raise DatasetError("one sample id per row required")
    tables = {}
    for party in range(partition.party_count):
        cols = {f: dataset.features[:, f].copy() for f in partition.features_of(party)}
        tables[party] = FeatureTable(party, sample_ids.copy(), cols)
    return tables


def merge_row(tables: Mapping[int, FeatureTable], sample_id: int, n_features: int) -> np.ndarray:
    """Reassemble a full feature row from every party's slice."""
    row = np.empty(n_features, dtype=np.float64)
    filled = 0
    for table in tables.values():
        for f, value in table.row(sample_id).items():
            row[f] = value
            filled += 1
    if filled != n_features:
        raise DatasetError(f"tables cover {filled} of {n_features} features")
    return row


def merge_tables(tables: Mapping[int, FeatureTable], n_features: int) -> np.ndarray:
    """Full feature matrix in shared sample-id order."""
    any_table = next(iter(tables.values()))
    out = np.empty((len(any_table.sample_ids), n_features), dtype=np.float64)
    for table in tables.values():
        for f, col in table.columns.items():
            out[:, f] = col
    return out
