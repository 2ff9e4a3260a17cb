"""Teacher label embeddings, the class relevance matrix and mixup partner selection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import _format_floats, _parse_header, parse_vector_line
from .errors import ConfigError, DataError, DegenerateInput, DimensionError, ParseError
from .numerics import SIMILARITY_KINDS, RngStream, pairwise_similarity, softmax

SELECTION_MODES = ("probabilistic", "deterministic", "random")
TRANSFORMS = ("softmax", "identity")


@dataclass
class EmbeddingTable:
    """Per-label text embeddings, optionally with per-sample image embeddings."""

    label_vectors: np.ndarray
    sample_vectors: np.ndarray | None = None

    def __post_init__(self):
        self.label_vectors = np.ascontiguousarray(self.label_vectors, dtype=np.float32)
        if self.label_vectors.ndim != 2:
            raise DimensionError("label_vectors must be C x d")
        if self.sample_vectors is not None:
            self.sample_vectors = np.ascontiguousarray(self.sample_vectors, dtype=np.float32)
            if self.sample_vectors.ndim != 2 or self.sample_vectors.shape[1] != self.dim:
                raise DimensionError(
                    f"sample vectors must have dim {self.dim}, got shape {self.sample_vectors.shape}"
                )

    @property
    def dim(self) -> int:
        return int(self.label_vectors.shape[1])

    @property
    def num_classes(self) -> int:
        return int(self.label_vectors.shape[0])


def make_label_embeddings(
    num_classes: int, dim: int, rng: RngStream, num_groups: int = 5, within: float = 0.5
) -> np.ndarray:
    """Unit-norm synthetic label embeddings with group structure.

    Classes are dealt round-robin into ``num_groups`` groups; each class is its
    group centre plus ``within`` times a random direction, so same-group labels
    are semantically close.
    """
    if num_groups < 1:
        raise ConfigError("num_groups must be >= 1")
    centres = rng.gaussians((num_groups, dim))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    jitter = rng.gaussians((num_classes, dim))
    jitter /= np.linalg.norm(jitter, axis=1, keepdims=True)
    vecs = centres[np.arange(num_classes) % num_groups] + within * jitter
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return vecs.astype(np.float32)


def make_sample_embeddings(
    features: np.ndarray, spread: float, noise: float, rng: RngStream
) -> np.ndarray:
    """Stand-in for a frozen image encoder: rescaled inputs plus encoder noise."""
    out = np.asarray(features, dtype=np.float64) / spread
    if noise > 0:
        out = out + noise * rng.gaussians(out.shape)
    return out.astype(np.float32)


@dataclass
class RelevanceMatrix:
    raw: np.ndarray
    scores: np.ndarray
    kind: str
    transform: str
    temperature: float

    @property
    def num_classes(self) -> int:
        return int(self.raw.shape[0])


@dataclass(frozen=True)
class SelectionPolicy:
    mode: str = "probabilistic"
    temperature: float = 0.5

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise ConfigError(f"unknown selection mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigError(f"selection temperature must be positive, got {self.temperature}")


def build_relevance(
    emb: EmbeddingTable,
    kind: str = "cosine",
    transform: str = "softmax",
    temperature: float = 0.5,
) -> RelevanceMatrix:
    """Pairwise label relevance.

    ``raw`` holds the similarities; ``scores`` holds the transformed values,
    where the softmax runs over each row with the diagonal masked out.
    """
    if kind not in SIMILARITY_KINDS:
        raise ConfigError(f"unknown similarity kind {kind!r}")
    if transform not in TRANSFORMS:
        raise ConfigError(f"unknown relevance transform {transform!r}")
    if emb.num_classes < 2:
        raise DegenerateInput("relevance needs at least two classes")
    raw = pairwise_similarity(emb.label_vectors, kind)
    if transform == "softmax":
        masked = raw.copy()
        np.fill_diagonal(masked, -np.inf)
        scores = softmax(masked, temperature)
    else:
        scores = raw.copy()
    return RelevanceMatrix(
        raw.astype(np.float32), scores.astype(np.float32), kind, transform, float(temperature)
    )


def candidate_classes(target: int, available: Iterable[int]) -> np.ndarray:
    """Available classes minus the target; the target alone if nothing else is held."""
    avail = sorted({int(a) for a in available})
    if not avail:
        raise DegenerateInput("no locally available classes")
    cands = [a for a in avail if a != target]
    return np.array(cands or [target], dtype=np.int64)


def selection_distribution(
    rel: RelevanceMatrix, target: int, available: Iterable[int], policy: SelectionPolicy
) -> tuple[np.ndarray, np.ndarray]:
    """Probability of drawing each candidate partner class for ``target``.

    Returns ``(classes, probs)`` with ``classes`` ascending.
    """
    cands = candidate_classes(target, available)
    if cands.size == 1:
        return cands, np.ones(1)
    row = rel.raw[target, cands].astype(np.float64)
    if policy.mode == "random":
        probs = np.full(cands.size, 1.0 / cands.size)
    elif policy.mode == "deterministic":
        probs = np.zeros(cands.size)
        probs[int(np.argmax(row))] = 1.0
    elif rel.transform == "softmax":
        probs = softmax(row, policy.temperature)
    else:
        w = np.clip(row, 0.0, None)
        total = w.sum()
        probs = w / total if total > 0 else np.full(cands.size, 1.0 / cands.size)
    return cands, probs


def save_embeddings(path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    lines = [f"#dim={vectors.shape[1]}"]
    lines += [f"{i}\t{_format_floats(v)}" for i, v in enumerate(vectors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vectors(path, expected: int | None = None) -> np.ndarray:
    """Read an id-keyed vector file whose ids must cover ``0..n-1`` exactly."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DataError(f"{path}: empty file")
    dim = _parse_header(text[0], ("dim",))["dim"]
    rows: dict[int, np.ndarray] = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        key, vec = parse_vector_line(line, lineno, dim)
        if key < 0:
            raise ParseError(f"negative id {key}", lineno)
        if key in rows:
            raise ParseError(f"duplicate id {key}", lineno)
        rows[key] = vec
    n = len(rows) if expected is None else expected
    missing = [i for i in range(n) if i not in rows]
    if missing or len(rows) != n:
        raise ParseError(f"ids must cover 0..{n - 1} exactly; missing {missing[:5]}")
    if n == 0:
        raise DataError(f"{path}: no vectors")
    return np.stack([rows[i] for i in range(n)])


def load_embeddings(path, sample_path=None, num_samples: int | None = None) -> EmbeddingTable:
    labels = load_vectors(path)
    samples = None
    if sample_path is not None:
        samples = load_vectors(sample_path, num_samples)
    return EmbeddingTable(labels, samples)
