"""Small numeric kernels and counter-based random streams.

Feature and weight data are float32; reductions accumulate in float64.
"""

from __future__ import annotations

from typing import Literal, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInput, DimensionError

SimilarityKind = Literal["cosine", "l1", "l2", "dot"]
SIMILARITY_KINDS: tuple[str, ...] = ("cosine", "l1", "l2", "dot")

_U64 = (1 << 64) - 1


def as_vec32(x: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def similarity(a, b, kind: str = "cosine") -> float:
    """Similarity where larger always means more alike.

    ``l1`` and ``l2`` return the negated distance so the same downstream
    softmax applies to every kind.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise DimensionError(f"similarity needs equal nonempty vectors, got {a.size} and {b.size}")
    if kind == "cosine":
        na = np.linalg.norm(a)
        nb = np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise DegenerateInput("cosine similarity of a zero vector")
        return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    if kind == "dot":
        return float(np.dot(a, b))
    if kind == "l2":
        return -float(np.linalg.norm(a - b))
    if kind == "l1":
        return -float(np.abs(a - b).sum())
    raise ConfigError(f"unknown similarity kind {kind!r}")


def pairwise_similarity(x: np.ndarray, kind: str = "cosine") -> np.ndarray:
    """C x C similarity matrix between the rows of ``x`` (float64)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError("pairwise_similarity expects a nonempty 2-D array")
    if kind == "cosine":
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInput("cosine similarity of a zero vector")
        u = x / norms[:, None]
        return np.clip(u @ u.T, -1.0, 1.0)
    if kind == "dot":
        return x @ x.T
    diff = x[:, None, :] - x[None, :, :]
    if kind == "l2":
        return -np.sqrt((diff * diff).sum(axis=2))
    if kind == "l1":
        return -np.abs(diff).sum(axis=2)
    raise ConfigError(f"unknown similarity kind {kind!r}")


def softmax(x, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {temperature}")
    z = np.asarray(x, dtype=np.float64)
    if z.size == 0:
        raise DegenerateInput("softmax of an empty vector")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class RngStream:
    """Philox stream keyed by ``(global_seed, stream_id)``, with ``round`` in the counter.

    Two streams built from the same triple replay the same draws; the sequence
    never depends on which other streams were used before it.
    """

    def __init__(self, global_seed: int, stream_id: int, round: int = 0):
        self.seed_material = (int(global_seed) & _U64, int(stream_id) & _U64, int(round) & _U64)
        seed, sid, rnd = self.seed_material
        bitgen = np.random.Philox(
            counter=np.array([0, 0, rnd, 0], dtype=np.uint64),
            key=np.array([seed, sid], dtype=np.uint64),
        )
        self._gen = np.random.Generator(bitgen)

    def __repr__(self) -> str:
        return "RngStream(seed=%d, stream=%d, round=%d)" % self.seed_material

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(lo + (hi - lo) * self._gen.random())

    def uniforms(self, lo: float, hi: float, size: int) -> np.ndarray:
        return lo + (hi - lo) * self._gen.random(size)

    def gaussian(self) -> float:
        return float(self._gen.standard_normal())

    def gaussians(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def categorical(self, probs) -> int:
        p = np.asarray(probs, dtype=np.float64).ravel()
        if p.size == 0:
            raise DegenerateInput("categorical over an empty probability vector")
        if np.any(p < 0) or not np.isfinite(p).all():
            raise DegenerateInput("categorical probabilities must be finite and nonnegative")
        total = p.sum()
        if total <= 0:
            raise DegenerateInput("categorical probabilities sum to zero")
        cdf = np.cumsum(p / total)
        idx = int(np.searchsorted(cdf, self._gen.random(), side="right"))
        # cdf[-1] may round below 1
        return min(idx, p.size - 1)

    def dirichlet(self, alpha: float, k: int) -> np.ndarray:
        if alpha <= 0:
            raise ConfigError(f"dirichlet concentration must be positive, got {alpha}")
        if k < 1:
            raise ConfigError(f"dirichlet dimension must be >= 1, got {k}")
        g = self._gen.standard_gamma(alpha, size=k)
        total = g.sum()
        if total <= 0 or not np.isfinite(total):
            # every gamma underflowed (tiny alpha): put all mass on one coordinate
            out = np.zeros(k)
            out[int(self._gen.integers(k))] = 1.0
            return out
        return g / total

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct integers from ``range(n)``."""
        return self._gen.choice(n, size=size, replace=False)

    def integers(self, lo: int, hi: int, size=None):
        return self._gen.integers(lo, hi, size=size)


def rng_uniform(stream: RngStream, lo: float, hi: float) -> float:
    return stream.uniform(lo, hi)


def rng_categorical(stream: RngStream, probs) -> int:
    return stream.categorical(probs)


def rng_gaussian(stream: RngStream) -> float:
    return stream.gaussian()


def rng_dirichlet(stream: RngStream, alpha: float, k: int) -> np.ndarray:
    return stream.dirichlet(alpha, k)
