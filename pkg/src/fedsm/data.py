"""Labeled vector datasets, long-tail subsampling and Dirichlet client partitioning."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ParseError
from .numerics import RngStream


@dataclass
class Dataset:
    """Samples stored column-wise: ``features[i]`` carries label ``labels[i]``."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class LongTailSpec:
    imbalance_factor: float
    head_count: int

    def __post_init__(self):
        if self.imbalance_factor < 1:
            raise ConfigError(f"imbalance factor must be >= 1, got {self.imbalance_factor}")
        if self.head_count < 1:
            raise ConfigError(f"head count must be >= 1, got {self.head_count}")

    def class_targets(self, num_classes: int) -> list[int]:
        """Exponential profile ``N_1 * IF**(-c/(C-1))`` rounded half-up."""
        if num_classes == 1:
            return [self.head_count]
        return [
            int(math.floor(self.head_count * self.imbalance_factor ** (-c / (num_classes - 1)) + 0.5))
            for c in range(num_classes)
        ]


@dataclass
class Partition:
    assignment: list[np.ndarray]
    per_client_class_counts: np.ndarray = field(repr=False)

    @property
    def num_clients(self) -> int:
        return len(self.assignment)

    def shard_sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignment], dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Partition):
            return NotImplemented
        return len(self.assignment) == len(other.assignment) and all(
            np.array_equal(a, b) for a, b in zip(self.assignment, other.assignment)
        )


def _counts_matrix(assignment: list[np.ndarray], labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(assignment), num_classes), dtype=np.int64)
    for k, idx in enumerate(assignment):
        if len(idx):
            out[k] = np.bincount(labels[idx], minlength=num_classes)
    return out


def make_partition(assignment, labels: np.ndarray, num_classes: int) -> Partition:
    assignment = [np.sort(np.asarray(a, dtype=np.int64)) for a in assignment]
    return Partition(assignment, _counts_matrix(assignment, labels, num_classes))


def generate_synthetic(
    num_classes: int,
    dim: int,
    per_class: int,
    class_anchors: np.ndarray | None,
    spread: float,
    noise: float,
    rng: RngStream,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class, ordered by class.

    With ``class_anchors`` (C x dim) the class means are ``spread * anchor``, so
    classes whose label embeddings are close also overlap in input space.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    if spread <= 0 or noise < 0:
        raise ConfigError("spread must be positive and noise nonnegative")
    if class_anchors is not None:
        anchors = np.asarray(class_anchors, dtype=np.float64)
        if anchors.shape != (num_classes, dim):
            raise DimensionError(
                f"anchors have shape {anchors.shape}, expected ({num_classes}, {dim})"
            )
    else:
        anchors = rng.gaussians((num_classes, dim))
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    means = spread * anchors
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + noise * rng.gaussians((labels.size, dim))
    return Dataset(features.astype(np.float32), labels, num_classes)


def holdout_split(ds: Dataset, per_class: int, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Move ``per_class`` uniformly chosen samples of every class into a balanced test set."""
    test_idx = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size < per_class:
            raise DataError(f"class {c} has {members.size} samples, cannot hold out {per_class}")
        test_idx.append(members[rng.permutation(members.size)[:per_class]])
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, np.int64)
    keep = np.setdiff1d(np.arange(len(ds)), test, assume_unique=True)
    return ds.subset(keep), ds.subset(test)


def long_tail_indices(ds: Dataset, spec: LongTailSpec, rng: RngStream) -> np.ndarray:
    targets = spec.class_targets(ds.num_classes)
    kept = []
    for c, target in enumerate(targets):
        members = np.flatnonzero(ds.labels == c)
        if members.size < target:
            raise DataError(f"class {c} has {members.size} samples but {target} are required")
        kept.append(members[rng.permutation(members.size)[:target]])
    return np.sort(np.concatenate(kept))


def apply_long_tail(ds: Dataset, spec: LongTailSpec, rng: RngStream) -> Dataset:
    return ds.subset(long_tail_indices(ds, spec, rng))


def _largest_remainder(props: np.ndarray, total: int) -> np.ndarray:
    raw = props * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _draw_assignment(ds: Dataset, k: int, alpha: float, rng: RngStream) -> list[list[int]]:
    clients: list[list[int]] = [[] for _ in range(k)]
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        props = rng.dirichlet(alpha, k)
        counts = _largest_remainder(props, members.size)
        members = members[rng.permutation(members.size)]
        start = 0
        for j in range(k):
            clients[j].extend(members[start : start + counts[j]].tolist())
            start += counts[j]
    return clients


def dirichlet_partition(
    ds: Dataset,
    num_clients: int,
    alpha: float,
    rng: RngStream,
    min_per_client: int = 2,
    max_retries: int = 100,
) -> Partition:
    """Split each class across clients with a Dirichlet(alpha) draw.

    Redraws up to ``max_retries`` times until every client holds at least
    ``min_per_client`` samples, then tops up starved clients one sample at a
    time from the largest client.
    """
    if num_clients < 1:
        raise ConfigError("need at least one client")
    if alpha <= 0:
        raise ConfigError(f"dirichlet alpha must be positive, got {alpha}")
    if num_clients * min_per_client > len(ds):
        raise ConfigError(
            f"{num_clients} clients x {min_per_client} samples exceeds dataset size {len(ds)}"
        )
    clients = _draw_assignment(ds, num_clients, alpha, rng)
    for _ in range(max_retries):
        if min(len(c) for c in clients) >= min_per_client:
            break
        clients = _draw_assignment(ds, num_clients, alpha, rng)
    while True:
        sizes = [len(c) for c in clients]
        needy = [j for j, s in enumerate(sizes) if s < min_per_client]
        if not needy:
            break
        donor = int(np.argmax(sizes))
        donor_labels = ds.labels[clients[donor]]
        # give away a sample of the donor's most common class
        common = int(np.argmax(np.bincount(donor_labels, minlength=ds.num_classes)))
        pos = int(np.flatnonzero(donor_labels == common)[-1])
        clients[needy[0]].append(clients[donor].pop(pos))
    return make_partition(clients, ds.labels, ds.num_classes)


def _format_floats(values: np.ndarray) -> str:
    # repr of the float64 widening round-trips the float32 exactly
    return ",".join(repr(float(v)) for v in values)


def save_dataset(path, ds: Dataset) -> None:
    lines = [f"#classes={ds.num_classes} dim={ds.dim}"]
    for x, y in zip(ds.features, ds.labels):
        lines.append(f"{int(y)}\t{_format_floats(x)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str, keys: tuple[str, ...], lineno: int = 1) -> dict[str, int]:
    if not line.startswith("#"):
        raise ParseError(f"expected header starting with '#', got {line!r}", lineno)
    fields = {}
    for token in line[1:].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"bad header token {token!r}", lineno)
        try:
            fields[key] = int(value)
        except ValueError:
            raise ParseError(f"header value {token!r} is not an integer", lineno) from None
    missing = [k for k in keys if k not in fields]
    if missing:
        raise ParseError(f"header missing {', '.join(missing)}", lineno)
    return fields


def parse_vector_line(line: str, lineno: int, dim: int) -> tuple[int, np.ndarray]:
    """Parse ``<int id>\\t<f1,...,f_dim>``."""
    head, sep, body = line.partition("\t")
    if not sep:
        raise ParseError("expected '<id>\\t<values>'", lineno)
    try:
        key = int(head)
    except ValueError:
        raise ParseError(f"id {head!r} is not an integer", lineno) from None
    try:
        values = np.array([float(v) for v in body.split(",")], dtype=np.float32)
    except ValueError:
        raise ParseError("malformed float value", lineno) from None
    if values.size != dim:
        raise ParseError(f"expected {dim} values, got {values.size}", lineno)
    if not np.isfinite(values).all():
        raise ParseError("non-finite value", lineno)
    return key, values


def load_dataset(path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DataError(f"{path}: empty file")
    header = _parse_header(text[0], ("classes", "dim"))
    num_classes, dim = header["classes"], header["dim"]
    feats, labels = [], []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        label, values = parse_vector_line(line, lineno, dim)
        if not 0 <= label < num_classes:
            raise ParseError(f"label {label} outside [0, {num_classes})", lineno)
        feats.append(values)
        labels.append(label)
    if not labels:
        raise DataError(f"{path}: no samples")
    return Dataset(np.stack(feats), np.array(labels), num_classes)


def save_partition(path, partition: Partition) -> None:
    lines = [f"#clients={partition.num_clients}"]
    for k, idx in enumerate(partition.assignment):
        lines.append(f"{k}\t" + ",".join(str(int(i)) for i in idx))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_partition(path, ds: Dataset) -> Partition:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DataError(f"{path}: empty file")
    num_clients = _parse_header(text[0], ("clients",))["clients"]
    assignment: list[np.ndarray | None] = [None] * num_clients
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        head, sep, body = line.partition("\t")
        if not sep:
            raise ParseError("expected '<client>\\t<indices>'", lineno)
        try:
            k = int(head)
            idx = [int(v) for v in body.split(",")] if body.strip() else []
        except ValueError:
            raise ParseError("malformed integer", lineno) from None
        if not 0 <= k < num_clients or assignment[k] is not None:
            raise ParseError(f"bad or duplicate client id {k}", lineno)
        assignment[k] = np.array(idx, dtype=np.int64)
    if any(a is None for a in assignment):
        raise DataError(f"{path}: missing client rows")
    flat = np.concatenate(assignment) if assignment else np.empty(0, np.int64)
    if flat.size != len(ds) or not np.array_equal(np.sort(flat), np.arange(len(ds))):
        raise DataError(f"{path}: partition does not cover every sample exactly once")
    return make_partition(assignment, ds.labels, ds.num_classes)
