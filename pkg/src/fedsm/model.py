"""Student MLP with handwritten backprop for CE, KL and feature-MSE distillation."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInput, DimensionError, NumericsError, ParseError
from .numerics import RngStream, log_softmax

DISTILL_MODES = ("kl", "mse", "none")

CHECKPOINT_MAGIC = b"FEDSMCK\x00"
CHECKPOINT_VERSION = 1

GradBuffer = list  # list[np.ndarray], congruent with StudentModel.params()


@dataclass
class TrainConfig:
    lr_local: float = 0.1
    lr_retrain: float = 0.01
    batch_size: int = 32
    epochs_per_round: int = 10
    distill_mode: str = "kl"
    teacher_logit_scale: float = 10.0

    def __post_init__(self):
        if self.lr_local < 0 or self.lr_retrain < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_per_round < 0:
            raise ConfigError("epochs_per_round must be >= 0")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"unknown distill mode {self.distill_mode!r}")


@dataclass
class StudentModel:
    """Extractor ``f`` (ReLU MLP + linear projection) followed by a linear classifier ``g``.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    hidden: list[tuple[np.ndarray, np.ndarray]]
    projection: tuple[np.ndarray, np.ndarray]
    classifier: tuple[np.ndarray, np.ndarray]
    dtype: np.dtype = field(default=np.dtype(np.float32), repr=False)

    def __post_init__(self):
        dims = self.dims
        layers = self.layers()
        for i, (w, b) in enumerate(layers):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise DimensionError(f"layer {i} shapes {w.shape}/{b.shape} do not chain")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [*self.hidden, self.projection, self.classifier]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers() for p in layer]

    @property
    def dims(self) -> list[int]:
        first = self.hidden[0][0] if self.hidden else self.projection[0]
        return [int(first.shape[0])] + [int(w.shape[1]) for w, _ in self.layers()]

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-2]

    @property
    def num_classes(self) -> int:
        return self.dims[-1]

    def copy(self, dtype=None) -> "StudentModel":
        dt = np.dtype(dtype or self.dtype)
        cp = lambda layer: (layer[0].astype(dt, copy=True), layer[1].astype(dt, copy=True))
        return StudentModel(
            [cp(l) for l in self.hidden], cp(self.projection), cp(self.classifier), dt
        )

    def extractor_params(self) -> list[np.ndarray]:
        return [p for layer in [*self.hidden, self.projection] for p in layer]

    def extractor_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.extractor_params():
            h.update(p.tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        dims = self.dims
        head = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(dims) - 1)
        head += struct.pack(f"<{len(dims)}I", *dims)
        body = b"".join(p.astype("<f4").tobytes() for p in self.params())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StudentModel":
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ParseError("not a fedsm checkpoint (bad magic)")
        version, n_layers = struct.unpack_from("<II", blob, 8)
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}")
        off = 16
        dims = struct.unpack_from(f"<{n_layers + 1}I", blob, off)
        off += 4 * (n_layers + 1)
        layers = []
        for i in range(n_layers):
            n_w = dims[i] * dims[i + 1]
            w = np.frombuffer(blob, "<f4", n_w, off).reshape(dims[i], dims[i + 1])
            off += 4 * n_w
            b = np.frombuffer(blob, "<f4", dims[i + 1], off)
            off += 4 * dims[i + 1]
            layers.append((w.astype(np.float32), b.astype(np.float32)))
        if off != len(blob):
            raise ParseError(f"checkpoint has {len(blob) - off} trailing bytes")
        if n_layers < 2:
            raise ParseError("checkpoint needs at least projection and classifier layers")
        return cls(layers[:-2], layers[-2], layers[-1])


def init_model(
    input_dim: int, hidden: list[int], feature_dim: int, num_classes: int, rng: RngStream
) -> StudentModel:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    dims = [input_dim, *hidden, feature_dim, num_classes]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.gaussians((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w.astype(np.float32), np.zeros(fan_out, np.float32)))
    return StudentModel(layers[:-2], layers[-2], layers[-1])


def save_checkpoint(path, model: StudentModel) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_checkpoint(path) -> StudentModel:
    return StudentModel.from_bytes(Path(path).read_bytes())


def _forward_cache(model: StudentModel, x: np.ndarray):
    acts = [x]
    a = x
    for w, b in model.hidden:
        a = np.maximum(a @ w + b, 0)
        acts.append(a)
    w, b = model.projection
    feat = a @ w + b
    w, b = model.classifier
    logits = feat @ w + b
    return acts, feat, logits


def _check_input(model: StudentModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.shape[-1] != model.input_dim:
        raise DimensionError(f"input has dim {x.shape[-1]}, model expects {model.input_dim}")
    return x


def forward(model: StudentModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(feature, logits)``; works on one vector or a batch of rows."""
    x = _check_input(model, x)
    _, feat, logits = _forward_cache(model, x)
    return feat, logits


def extract_features(model: StudentModel, x) -> np.ndarray:
    return forward(model, x)[0]


def teacher_logits(h_v, label_vectors, scale: float = 10.0) -> np.ndarray:
    """``scale * cos(h_v, h_t_c)`` for every class; ``h_v`` may be a batch."""
    h = np.asarray(h_v, dtype=np.float64)
    t = np.asarray(getattr(label_vectors, "label_vectors", label_vectors), dtype=np.float64)
    if h.shape[-1] != t.shape[1]:
        raise DimensionError(f"image embedding dim {h.shape[-1]} != text dim {t.shape[1]}")
    hn = np.linalg.norm(h, axis=-1, keepdims=True)
    tn = np.linalg.norm(t, axis=1)
    if np.any(hn == 0) or np.any(tn == 0):
        raise DegenerateInput("cosine teacher logits of a zero vector")
    return (scale * ((h / hn) @ (t / tn[:, None]).T)).astype(np.float32)


def loss_and_grad(
    model: StudentModel,
    x,
    y,
    cfg: TrainConfig,
    teacher_logits: np.ndarray | None = None,
    teacher_features: np.ndarray | None = None,
) -> tuple[float, GradBuffer]:
    """Batch-mean loss and its gradient with respect to every parameter.

    kl:   CE(y, p) + KL(softmax(q) || softmax(p))
    mse:  CE(y, p) + mean squared error between student feature and h_v
    none: CE(y, p)
    """
    x = _check_input(model, np.atleast_2d(x))
    y = np.asarray(y, dtype=np.int64).ravel()
    n = x.shape[0]
    if n == 0 or y.shape[0] != n:
        raise DimensionError("batch must be nonempty with one label per row")
    mode = cfg.distill_mode
    if mode == "kl" and teacher_logits is None:
        raise ConfigError("kl distillation needs teacher logits")
    if mode == "mse" and teacher_features is None:
        raise ConfigError("mse distillation needs teacher features")

    acts, feat, logits = _forward_cache(model, x)
    logp = log_softmax(logits.astype(np.float64))
    ps = np.exp(logp)
    rows = np.arange(n)
    loss = -logp[rows, y].sum() / n
    dlogits = ps.copy()
    dlogits[rows, y] -= 1.0

    dfeat_extra = None
    if mode == "kl":
        q = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
        if q.shape != logits.shape:
            raise DimensionError(f"teacher logits shape {q.shape} != student {logits.shape}")
        logq = log_softmax(q)
        pt = np.exp(logq)
        loss += (pt * (logq - logp)).sum() / n
        dlogits += ps - pt
    elif mode == "mse":
        h = np.atleast_2d(np.asarray(teacher_features, dtype=np.float64))
        if h.shape != feat.shape:
            raise DimensionError(f"teacher features shape {h.shape} != student {feat.shape}")
        diff = feat.astype(np.float64) - h
        d = diff.shape[1]
        loss += (diff * diff).sum() / (n * d)
        dfeat_extra = 2.0 * diff / (n * d)
    dlogits /= n

    dt = model.dtype
    dlogits = dlogits.astype(dt)
    wc, _ = model.classifier
    grads_c = (feat.T @ dlogits, dlogits.sum(axis=0))
    dfeat = dlogits @ wc.T
    if dfeat_extra is not None:
        dfeat = dfeat + dfeat_extra.astype(dt)
    wp, _ = model.projection
    a = acts[-1]
    grads_p = (a.T @ dfeat, dfeat.sum(axis=0))
    da = dfeat @ wp.T
    grads_h = []
    for i in range(len(model.hidden) - 1, -1, -1):
        w, _ = model.hidden[i]
        dz = da * (acts[i + 1] > 0)
        grads_h.append((acts[i].T @ dz, dz.sum(axis=0)))
        da = dz @ w.T
    grads_h.reverse()
    grads = [g for pair in [*grads_h, grads_p, grads_c] for g in pair]
    return float(loss), grads


def sgd_step(model: StudentModel, grads: GradBuffer, lr: float) -> None:
    if lr < 0:
        raise ConfigError("learning rate must be nonnegative")
    if lr == 0:
        return
    step = model.dtype.type(lr)
    for p, g in zip(model.params(), grads):
        p -= step * g


def _batches(n: int, batch_size: int, rng: RngStream):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epochs(
    model: StudentModel,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: RngStream,
    teacher_logits: np.ndarray | None = None,
    teacher_features: np.ndarray | None = None,
    epochs: int | None = None,
) -> list[float]:
    """Minibatch SGD in place; returns the mean loss of each epoch."""
    epochs = cfg.epochs_per_round if epochs is None else epochs
    trace = []
    n = len(y)
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            loss, grads = loss_and_grad(
                model,
                x[idx],
                y[idx],
                cfg,
                None if teacher_logits is None else teacher_logits[idx],
                None if teacher_features is None else teacher_features[idx],
            )
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite training loss {loss}")
            sgd_step(model, grads, cfg.lr_local)
            total += loss * len(idx)
        trace.append(total / n)
    return trace


def classifier_loss_and_grad(model: StudentModel, feats: np.ndarray, labels: np.ndarray):
    w, b = model.classifier
    n = feats.shape[0]
    logp = log_softmax((feats @ w + b).astype(np.float64))
    rows = np.arange(n)
    loss = -logp[rows, labels].sum() / n
    d = np.exp(logp)
    d[rows, labels] -= 1.0
    d = (d / n).astype(model.dtype)
    return float(loss), (feats.T @ d, d.sum(axis=0))


def retrain_classifier(
    model: StudentModel,
    feats: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    epochs: int,
    rng: RngStream,
) -> list[float]:
    """Cross-entropy SGD on the classifier only; extractor and projection stay untouched."""
    feats = np.asarray(feats, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[1] != model.feature_dim:
        raise DimensionError(
            f"pseudo-features have shape {feats.shape}, classifier expects dim {model.feature_dim}"
        )
    if feats.shape[0] == 0:
        raise DegenerateInput("empty pseudo-feature set")
    w, b = model.classifier
    step = model.dtype.type(cfg.lr_retrain)
    trace = []
    for _ in range(epochs):
        total = 0.0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            loss, (gw, gb) = classifier_loss_and_grad(model, feats[idx], labels[idx])
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite retraining loss {loss}")
            w -= step * gw
            b -= step * gb
            total += loss * len(idx)
        trace.append(total / len(labels))
    return trace


def _relu_pattern(model: StudentModel, x) -> bytes:
    a = np.asarray(x, dtype=model.dtype)
    masks = []
    for w, b in model.hidden:
        z = a @ w + b
        masks.append(z > 0)
        a = np.maximum(z, 0)
    return b"".join(m.tobytes() for m in masks)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int
    worst_analytic: float = 0.0  # analytic value of the worst entry


def grad_check_report(
    model: StudentModel,
    x,
    y,
    cfg: TrainConfig,
    epsilon: float = 1e-3,
    teacher_logits: np.ndarray | None = None,
    teacher_features: np.ndarray | None = None,
) -> GradCheckReport:
    """Compare every analytic gradient entry with a central difference.

    Runs on a float64 copy. The per-entry error is
    ``|a - n| / max(|a|, |n|, 1e-6)``. Entries whose +-epsilon window flips a
    ReLU unit are skipped: the loss is not differentiable inside that window.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ConfigError(f"epsilon must lie in [1e-5, 1e-2], got {epsilon}")
    m = model.copy(np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    args = (cfg, teacher_logits, teacher_features)
    _, analytic = loss_and_grad(m, x, y, *args)
    base = _relu_pattern(m, x)
    worst, worst_a, checked, skipped = 0.0, 0.0, 0, 0
    for p, g in zip(m.params(), analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_and_grad(m, x, y, *args)
            smooth = _relu_pattern(m, x) == base
            flat[i] = orig - epsilon
            lm, _ = loss_and_grad(m, x, y, *args)
            smooth = smooth and _relu_pattern(m, x) == base
            flat[i] = orig
            if not smooth:
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            a = gflat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if err > worst:
                worst, worst_a = err, float(a)
            checked += 1
    return GradCheckReport(float(worst), checked, skipped, worst_a)


def grad_check(model, x, y, cfg, epsilon=1e-3, teacher_logits=None, teacher_features=None) -> float:
    """Max relative error of the analytic gradient; see ``grad_check_report``."""
    return grad_check_report(
        model, x, y, cfg, epsilon, teacher_logits, teacher_features
    ).max_rel_error
