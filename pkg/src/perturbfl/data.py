"""Dataset ingestion, synthetic generators, splitting and IID sharding."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IngestionError, UsageError
from .model import Sample


@dataclass
class Dataset:
    samples: list[Sample]
    feature_dim: int
    target_dim: int
    name: str = "dataset"
    feature_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.stack([s.x for s in self.samples]) if self.samples else np.zeros((0, self.feature_dim))
        T = np.stack([s.target for s in self.samples]) if self.samples else np.zeros((0, self.target_dim))
        return X, T

    @classmethod
    def from_arrays(cls, X, T, name: str = "dataset", **kw) -> "Dataset":
        X = np.asarray(X, dtype=np.float64)
        T = np.asarray(T, dtype=np.float64)
        if T.ndim == 1:
            T = T[:, None]
        if X.shape[0] != T.shape[0]:
            raise UsageError("feature and target row counts differ")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(T)):
            raise IngestionError(f"{name}: non-finite values")
        samples = [Sample(X[i].copy(), T[i].copy()) for i in range(X.shape[0])]
        return cls(samples, X.shape[1], T.shape[1], name, **kw)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.feature_dim, self.target_dim, self.name,
                       list(self.feature_names), list(self.target_names))


# -- normalisation --------------------------------------------------------


@dataclass
class Normalizer:
    kind: str
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, kind: str = "minmax") -> "Normalizer":
        if kind == "none":
            return cls(kind, np.zeros(X.shape[1]), np.ones(X.shape[1]))
        if X.shape[0] == 0:
            raise UsageError("cannot fit normalisation on zero rows")
        if kind == "minmax":
            lo = X.min(axis=0)
            span = X.max(axis=0) - lo
        elif kind == "zscore":
            lo = X.mean(axis=0)
            span = X.std(axis=0)
        else:
            raise UsageError(f"unknown normalisation {kind!r}")
        # constant columns map to 0
        span = np.where(span > 0, span, np.inf)
        return cls(kind, lo, span)

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return X.copy()
        return (X - self.shift) / self.scale


def normalize(ds: Dataset, norm: Normalizer) -> Dataset:
    X, T = ds.arrays()
    return Dataset.from_arrays(norm.apply(X), T, ds.name, feature_names=list(ds.feature_names),
                               target_names=list(ds.target_names))


# -- CSV ------------------------------------------------------------------


@dataclass
class CsvSchema:
    features: list[str]
    targets: list[str]
    categorical: list[str] = field(default_factory=list)
    normalization: str = "minmax"

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        targets = d.get("targets", d.get("target"))
        if isinstance(targets, str):
            targets = [targets]
        if not d.get("features") or not targets:
            raise UsageError("csv schema needs 'features' and 'targets'")
        return cls(list(d["features"]), list(targets), list(d.get("categorical", [])),
                   d.get("normalization", "minmax"))


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: file not found") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise IngestionError(f"{path}: header only, no data rows")
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise IngestionError(f"{path}:{i}: expected {len(header)} cells, got {len(r)}")
    return header, body


def _encode_columns(path, header, body, columns, categorical):
    """Numeric matrix for ``columns``; categorical ones expand to sorted one-hot blocks."""
    cols, names = [], []
    for name in columns:
        if name not in header:
            raise IngestionError(f"{path}: missing column {name!r}")
        j = header.index(name)
        cells = [r[j].strip() for r in body]
        if name in categorical:
            levels = sorted(set(cells))
            for lvl in levels:
                cols.append([1.0 if c == lvl else 0.0 for c in cells])
                names.append(f"{name}={lvl}")
            continue
        vals = []
        for i, c in enumerate(cells, start=2):
            try:
                v = float(c)
            except ValueError:
                raise IngestionError(f"{path}:{i}: column {name!r}: cannot parse {c!r} as a number") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}:{i}: column {name!r}: non-finite value {c!r}")
            vals.append(v)
        cols.append(vals)
        names.append(name)
    return np.array(cols, dtype=np.float64).T.reshape(len(body), len(cols)), names


def load_csv(path, schema: CsvSchema, fit_rows: Sequence[int] | None = None) -> Dataset:
    """Load a headed CSV into a Dataset.

    Features are normalised per ``schema.normalization`` using statistics from
    ``fit_rows`` only (all rows when omitted); pass the training indices to
    keep validation/test rows out of the fit.
    """
    path = Path(path)
    header, body = _read_rows(path)
    X, fnames = _encode_columns(path, header, body, schema.features, set(schema.categorical))
    T, tnames = _encode_columns(path, header, body, schema.targets, set(schema.categorical))
    rows = X if fit_rows is None else X[list(fit_rows)]
    X = Normalizer.fit(rows, schema.normalization).apply(X)
    return Dataset.from_arrays(X, T, path.stem, feature_names=fnames, target_names=tnames)


def save_csv(ds: Dataset, path) -> CsvSchema:
    """Write ``ds`` losslessly; returns the schema that reloads it."""
    fnames = ds.feature_names or [f"x{i}" for i in range(ds.feature_dim)]
    tnames = ds.target_names or [f"y{i}" for i in range(ds.target_dim)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(fnames + tnames)
        for s in ds.samples:
            w.writerow([repr(float(v)) for v in s.x] + [repr(float(v)) for v in s.target])
    return CsvSchema(fnames, tnames, normalization="none")


# -- synthetic ------------------------------------------------------------


def synth_classification(n_features: int, n_classes: int, n_samples: int, seed: int,
                         separation: float = 4.0) -> Dataset:
    """One Gaussian blob per class with one-hot targets; class sizes differ by at most 1."""
    if n_classes < 2:
        raise UsageError("need at least two classes")
    if n_features < 1 or n_samples < n_classes:
        raise UsageError("need n_features >= 1 and at least one sample per class")
    rng = np.random.default_rng([seed, 0xDA7A])
    centers = rng.normal(size=(n_classes, n_features))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    counts = [n_samples // n_classes + (c < n_samples % n_classes) for c in range(n_classes)]
    labels = np.repeat(np.arange(n_classes), counts)
    X = centers[labels] + rng.normal(size=(n_samples, n_features))
    order = rng.permutation(n_samples)
    X, labels = X[order], labels[order]
    T = np.eye(n_classes)[labels]
    return Dataset.from_arrays(X, T, f"synth-cls-{n_classes}")


def synth_regression(n_features: int, n_samples: int, seed: int, n_targets: int = 1,
                     noise: float = 0.05) -> Dataset:
    """Features in [0, 1] with a smooth nonlinear teacher target."""
    if n_features < 1 or n_samples < 1 or n_targets < 1:
        raise UsageError("invalid synthetic regression sizes")
    rng = np.random.default_rng([seed, 0x5EED])
    X = rng.random((n_samples, n_features))
    W = rng.normal(size=(n_features, n_targets)) / np.sqrt(n_features)
    T = np.tanh(X @ W) + noise * rng.normal(size=(n_samples, n_targets))
    return Dataset.from_arrays(X, T, "synth-reg")


# -- splitting / sharding -------------------------------------------------


@dataclass
class ShardPlan:
    assignments: list[list[int]]
    seed: int


@dataclass
class Splits:
    train: list[int]
    val: list[int]
    test: list[int]


def split_indices(n: int, ratios: Sequence[float], seed: int) -> Splits:
    total = float(sum(ratios))
    if total <= 0:
        raise UsageError("split ratios must sum to a positive number")
    rng = np.random.default_rng([seed, 0x5917])
    perm = [int(i) for i in rng.permutation(n)]
    n_val = int(n * ratios[1] / total)
    n_test = int(n * ratios[2] / total)
    n_train = n - n_val - n_test
    return Splits(perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])


def shard_indices(train: Sequence[int], k: int, seed: int) -> ShardPlan:
    if k < 1:
        raise UsageError("need at least one client")
    if k > len(train):
        raise UsageError(f"cannot give {k} clients a sample each from {len(train)} training rows")
    rng = np.random.default_rng([seed, 0x54A2D])
    perm = rng.permutation(len(train))
    parts = np.array_split(perm, k)
    return ShardPlan([sorted(int(train[i]) for i in p) for p in parts], seed)


def shard(ds: Dataset, k: int, split: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[ShardPlan, Splits]:
    """IID sharding of the training split into ``k`` parts of near-equal size."""
    splits = split_indices(len(ds), split, seed)
    return shard_indices(splits.train, k, seed), splits


def batch_indices(n: int, size: int | None, seed: int, round_id: int, client_id: int) -> list[int]:
    """Replayable mini-batch selection for one client in one round."""
    if size is None or size >= n:
        return list(range(n))
    rng = np.random.default_rng([seed, 0xBA7C, round_id, client_id])
    return sorted(int(i) for i in rng.permutation(n)[:size])


# -- config-driven assembly -----------------------------------------------


@dataclass
class FederatedData:
    dataset: Dataset  # normalised with train-only statistics
    splits: Splits
    plan: ShardPlan

    def shard_samples(self, k: int) -> list[Sample]:
        return [self.dataset.samples[i] for i in self.plan.assignments[k]]

    def train_samples(self) -> list[Sample]:
        return [self.dataset.samples[i] for i in self.splits.train]


def load_dataset_source(source: dict, default_seed: int) -> tuple[Dataset, str]:
    """Build the raw dataset named by a config ``dataset`` block."""
    kind = source.get("kind")
    seed = int(source.get("seed", default_seed))
    if kind == "csv":
        if "path" not in source:
            raise UsageError("csv dataset needs a 'path'")
        schema = CsvSchema.from_dict(source)
        norm = schema.normalization
        schema.normalization = "none"
        return load_csv(source["path"], schema), norm
    if kind == "synthetic_classification":
        ds = synth_classification(int(source["n_features"]), int(source["n_classes"]), int(source["n_samples"]), seed,
                                  float(source.get("separation", 4.0)))
    elif kind == "synthetic_regression":
        ds = synth_regression(int(source["n_features"]), int(source["n_samples"]), seed,
                              int(source.get("n_targets", 1)), float(source.get("noise", 0.05)))
    else:
        raise UsageError(f"unknown dataset kind {kind!r}")
    return ds, source.get("normalization", "none")


def build_federated(source: dict, k: int, split: Sequence[float], seed: int) -> FederatedData:
    raw, norm_kind = load_dataset_source(source, seed)
    splits = split_indices(len(raw), split, seed)
    X, _ = raw.arrays()
    norm = Normalizer.fit(X[splits.train], norm_kind)
    ds = normalize(raw, norm)
    return FederatedData(ds, splits, shard_indices(splits.train, k, seed))
