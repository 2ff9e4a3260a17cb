"""Round-synchronous federated protocol: local distillation training, prototype
aggregation, relevance-guided feature mixup and classifier retraining.

Every random draw comes from an ``RngStream`` keyed by (seed, stream, round),
so results do not depend on how many worker threads run the clients.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DimensionError, NumericsError, ProtocolError
from .evaluation import EvalReport, GroupThresholds, evaluate
from .model import StudentModel, TrainConfig, extract_features, retrain_classifier, train_epochs
from .numerics import RngStream
from .semantics import RelevanceMatrix, SelectionPolicy, candidate_classes, selection_distribution

log = logging.getLogger(__name__)

# RngStream ids; per-client streams add the client id.
STREAM_DATA = 1
STREAM_LONG_TAIL = 2
STREAM_PARTITION = 3
STREAM_EMBEDDINGS = 4
STREAM_HOLDOUT = 5
STREAM_TEACHER = 6
STREAM_INIT = 7
STREAM_SAMPLING = 8
STREAM_CLIENT_TRAIN = 1 << 20
STREAM_CLIENT_MIXUP = 2 << 20

MIXUP_SOURCES = ("sample", "prototype")


@dataclass(frozen=True)
class MixupConfig:
    lambda_lo: float = 0.65
    lambda_hi: float = 0.90
    per_class: int = 100
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    source: str = "sample"

    def __post_init__(self):
        if not 0.0 <= self.lambda_lo <= self.lambda_hi <= 1.0:
            raise ConfigError("mixup needs 0 <= lambda_lo <= lambda_hi <= 1")
        if self.per_class < 1:
            raise ConfigError("pseudo-features per class must be >= 1")
        if self.source not in MIXUP_SOURCES:
            raise ConfigError(f"unknown mixup source {self.source!r}")


@dataclass(frozen=True)
class RoundSchedule:
    total_rounds: int = 200
    retraining_rounds: int = 50
    participation: float = 0.4
    retrain_epochs: int = 50

    def __post_init__(self):
        if self.total_rounds < 0 or not 0 <= self.retraining_rounds <= self.total_rounds:
            raise ConfigError("need 0 <= retraining_rounds <= total_rounds")
        if not 0.0 < self.participation <= 1.0:
            raise ConfigError("participation must lie in (0, 1]")
        if self.retrain_epochs < 0:
            raise ConfigError("retrain_epochs must be >= 0")

    def is_retraining_round(self, t: int) -> bool:
        return self.retraining_rounds > 0 and t >= self.total_rounds - self.retraining_rounds


@dataclass
class PseudoFeatureSet:
    features: np.ndarray
    labels: np.ndarray
    # provenance of each row, kept for verification
    local_sources: np.ndarray
    global_sources: np.ndarray
    lambdas: np.ndarray
    partner_classes: np.ndarray

    def counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass
class PrototypeReport:
    client_id: int
    classes: np.ndarray
    prototypes: np.ndarray
    counts: np.ndarray


@dataclass
class ClientState:
    client_id: int
    x: np.ndarray
    y: np.ndarray
    teacher_logits: np.ndarray | None = None
    teacher_features: np.ndarray | None = None
    model: StudentModel | None = None
    features: np.ndarray | None = None  # cached extractor features, rows align with y
    prototypes: PrototypeReport | None = None

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def available_classes(self) -> np.ndarray:
        return np.unique(self.y)


@dataclass
class ServerState:
    model: StudentModel
    num_classes: int
    round: int = 0
    global_prototypes: np.ndarray | None = None
    prototype_mask: np.ndarray | None = None
    class_totals: np.ndarray | None = None


@dataclass
class RoundResult:
    round: int
    participants: list[int]
    dropped: list[int]
    mean_local_loss: float | None
    retrained: bool
    prototype_uploads: int
    report: EvalReport | None = None

    def metrics(self) -> dict:
        out = {
            "round": self.round,
            "participants": self.participants,
            "dropped": self.dropped,
            "mean_local_loss": self.mean_local_loss,
            "retrained": self.retrained,
            "prototype_uploads": self.prototype_uploads,
        }
        if self.report is not None:
            out.update(
                test_acc=self.report.overall_acc,
                many_acc=self.report.many_acc,
                medium_acc=self.report.medium_acc,
                few_acc=self.report.few_acc,
            )
        return out


def sample_clients(num_clients: int, fraction: float, rng: RngStream) -> np.ndarray:
    """``ceil(fraction * K)`` distinct ids, uniformly without replacement, ascending."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("participation fraction must lie in (0, 1]")
    m = min(num_clients, max(1, math.ceil(round(fraction * num_clients, 9))))
    if m == num_clients:
        return np.arange(num_clients)
    return np.sort(rng.choice(num_clients, m))


def local_prototypes(client_id: int, features: np.ndarray, labels: np.ndarray) -> PrototypeReport:
    """Per-class mean of extractor features for the classes present locally."""
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.zeros((classes.size, features.shape[1]), dtype=np.float64)
    np.add.at(sums, inverse, features.astype(np.float64))
    protos = (sums / counts[:, None]).astype(np.float32)
    return PrototypeReport(client_id, classes, protos, counts.astype(np.int64))


def aggregate_prototypes(
    reports: list[PrototypeReport], num_classes: int, dim: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Count-weighted mean of client prototypes.

    Returns ``(prototypes, present_mask, class_totals)``; classes nobody
    reported keep a zero row and ``present_mask`` False.
    """
    sums = np.zeros((num_classes, dim), dtype=np.float64)
    totals = np.zeros(num_classes, dtype=np.int64)
    for rep in sorted(reports, key=lambda r: r.client_id):
        for c, proto, n in zip(rep.classes, rep.prototypes, rep.counts):
            sums[c] += proto.astype(np.float64) * int(n)
            totals[c] += int(n)
    present = totals > 0
    out = np.zeros((num_classes, dim), dtype=np.float64)
    out[present] = sums[present] / totals[present, None]
    missing = np.flatnonzero(~present)
    if missing.size:
        log.warning("no client reported a prototype for classes %s", missing.tolist())
    return out.astype(np.float32), present, totals


def aggregate_models(
    models: list[StudentModel], sizes, client_ids=None
) -> StudentModel:
    """Parameter-wise average weighted by shard size, renormalized over the given clients."""
    if not models:
        raise ProtocolError("no client models to aggregate")
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.shape != (len(models),) or np.any(sizes <= 0):
        raise ConfigError("need one positive shard size per model")
    order = np.argsort(client_ids, kind="stable") if client_ids is not None else range(len(models))
    dims = models[0].dims
    for m in models:
        if m.dims != dims:
            raise DimensionError(f"cannot average models with dims {dims} and {m.dims}")
    weights = sizes / sizes.sum()
    out = models[0].copy()
    for j, target in enumerate(out.params()):
        acc = np.zeros(target.shape, dtype=np.float64)
        for i in order:
            acc += weights[i] * models[i].params()[j].astype(np.float64)
        target[...] = acc.astype(target.dtype)
    return out


def mix(local: np.ndarray, global_: np.ndarray, lam) -> np.ndarray:
    """``(1 - lam) * local + lam * global``, computed in float64."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    return ((1.0 - lam) * np.asarray(local, np.float64) + lam * np.asarray(global_, np.float64)).astype(
        np.float32
    )


def generate_pseudo_features(
    features: np.ndarray,
    labels: np.ndarray,
    global_prototypes: np.ndarray,
    rel: RelevanceMatrix,
    cfg: MixupConfig,
    rng: RngStream,
    prototype_mask: np.ndarray | None = None,
) -> PseudoFeatureSet:
    """Exactly ``cfg.per_class`` pseudo-features for every class.

    For target class c: partner v is drawn from the selection distribution over
    locally held classes, a local feature of v is drawn uniformly (or the local
    class-v prototype when ``cfg.source == "prototype"``), and the pair is mixed
    with lambda ~ U[lambda_lo, lambda_hi].
    """
    num_classes = global_prototypes.shape[0]
    if prototype_mask is not None and not prototype_mask.all():
        missing = np.flatnonzero(~prototype_mask).tolist()
        raise ProtocolError(f"no global prototype for classes {missing}")
    if len(labels) == 0:
        raise ProtocolError("client holds no samples to mix")
    if features.shape[1] != global_prototypes.shape[1]:
        raise DimensionError("local feature dim differs from prototype dim")
    available = np.unique(labels)
    members = {int(v): np.flatnonzero(labels == v) for v in available}
    local_protos = None
    if cfg.source == "prototype":
        rep = local_prototypes(-1, features, labels)
        local_protos = {int(c): p for c, p in zip(rep.classes, rep.prototypes)}

    s = cfg.per_class
    local_src, partners, lambdas = [], [], []
    for c in range(num_classes):
        cands, probs = selection_distribution(rel, c, available, cfg.policy)
        cdf = np.cumsum(probs)
        cdf /= cdf[-1]
        u_class = rng.uniforms(0.0, 1.0, s)
        u_member = rng.uniforms(0.0, 1.0, s)
        lam = rng.uniforms(cfg.lambda_lo, cfg.lambda_hi, s)
        picks = cands[np.minimum(np.searchsorted(cdf, u_class, side="right"), cands.size - 1)]
        rows = np.empty((s, features.shape[1]), dtype=np.float32)
        for i, v in enumerate(picks):
            if local_protos is not None:
                rows[i] = local_protos[int(v)]
            else:
                pool = members[int(v)]
                rows[i] = features[pool[min(int(u_member[i] * pool.size), pool.size - 1)]]
        local_src.append(rows)
        partners.append(picks)
        lambdas.append(lam)
    labels_out = np.repeat(np.arange(num_classes), s)
    local_src = np.concatenate(local_src)
    global_src = global_prototypes[labels_out]
    lambdas = np.concatenate(lambdas)
    return PseudoFeatureSet(
        features=mix(local_src, global_src, lambdas),
        labels=labels_out,
        local_sources=local_src,
        global_sources=global_src,
        lambdas=lambdas,
        partner_classes=np.concatenate(partners),
    )


def client_update(
    client: ClientState, global_model: StudentModel, cfg: TrainConfig, seed: int, t: int
) -> tuple[StudentModel, float | None]:
    """Local training (CE plus optional distillation) on a copy of the broadcast model."""
    model = global_model.copy()
    rng = RngStream(seed, STREAM_CLIENT_TRAIN + client.client_id, t)
    trace = train_epochs(
        model, client.x, client.y, cfg, rng, client.teacher_logits, client.teacher_features
    )
    return model, (trace[-1] if trace else None)


@dataclass
class Federation:
    """Everything fixed for a run: clients, configs, relevance and seed."""

    clients: list[ClientState]
    num_classes: int
    train_cfg: TrainConfig
    mixup_cfg: MixupConfig
    schedule: RoundSchedule
    relevance: RelevanceMatrix | None
    seed: int
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    train_counts: np.ndarray | None = None
    thresholds: GroupThresholds = field(default_factory=GroupThresholds)
    threads: int = 1
    counters: dict = field(default_factory=lambda: {"prototype_uploads": 0, "retrain_calls": 0})

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def _map(self, fn: Callable, items: list) -> list:
        if self.threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def evaluate(self, model: StudentModel) -> EvalReport | None:
        if self.x_test is None:
            return None
        return evaluate(model, self.x_test, self.y_test, self.train_counts, self.thresholds)

    def run_round(self, server: ServerState) -> RoundResult:
        t = server.round
        if t >= self.schedule.total_rounds:
            raise ProtocolError(f"round {t} is past the schedule ({self.schedule.total_rounds})")
        selected = sample_clients(
            self.num_clients,
            self.schedule.participation,
            RngStream(self.seed, STREAM_SAMPLING, t),
        ).tolist()
        broadcast = server.model

        def train(k):
            try:
                return k, *client_update(self.clients[k], broadcast, self.train_cfg, self.seed, t)
            except NumericsError as exc:
                log.warning("round %d: client %d dropped: %s", t, k, exc)
                return k, None, None

        results = [r for r in self._map(train, selected)]
        dropped = [k for k, m, _ in results if m is None]
        survivors = [(k, m, loss) for k, m, loss in results if m is not None]
        if not survivors:
            raise NumericsError(f"round {t}: every selected client diverged")
        local = {k: m for k, m, _ in survivors}

        retrain = self.schedule.is_retraining_round(t)
        uploads = 0
        if retrain:
            uploads = self._prototype_phase(server, local)
            self._retrain_phase(server, local, t, dropped)
            survivors = [(k, local[k], loss) for k, _, loss in survivors if k in local]
            if not survivors:
                raise NumericsError(f"round {t}: every selected client failed retraining")

        ids = [k for k, _, _ in survivors]
        server.model = aggregate_models(
            [m for _, m, _ in survivors], [len(self.clients[k]) for k in ids], ids
        )
        losses = [loss for _, _, loss in survivors if loss is not None]
        server.round = t + 1
        return RoundResult(
            round=t,
            participants=ids,
            dropped=sorted(dropped),
            mean_local_loss=float(np.mean(losses)) if losses else None,
            retrained=retrain,
            prototype_uploads=uploads,
            report=self.evaluate(server.model),
        )

    def _prototype_phase(self, server: ServerState, local: dict[int, StudentModel]) -> int:
        # every client reports; participants with their freshly trained extractor
        def report(client: ClientState):
            model = local.get(client.client_id, server.model)
            client.features = extract_features(model, client.x)
            client.prototypes = local_prototypes(client.client_id, client.features, client.y)
            return client.prototypes

        reports = self._map(report, self.clients)
        self.counters["prototype_uploads"] += len(reports)
        protos, mask, totals = aggregate_prototypes(
            reports, self.num_classes, server.model.feature_dim
        )
        server.global_prototypes, server.prototype_mask, server.class_totals = protos, mask, totals
        return len(reports)

    def _retrain_phase(
        self, server: ServerState, local: dict[int, StudentModel], t: int, dropped: list[int]
    ) -> None:
        if self.relevance is None:
            raise ProtocolError("retraining rounds need a relevance matrix")

        def retrain(k):
            client = self.clients[k]
            rng = RngStream(self.seed, STREAM_CLIENT_MIXUP + k, t)
            pseudo = generate_pseudo_features(
                client.features,
                client.y,
                server.global_prototypes,
                self.relevance,
                self.mixup_cfg,
                rng,
                server.prototype_mask,
            )
            try:
                retrain_classifier(
                    local[k], pseudo.features, pseudo.labels, self.train_cfg,
                    self.schedule.retrain_epochs, rng,
                )
            except NumericsError as exc:
                log.warning("round %d: client %d dropped during retraining: %s", t, k, exc)
                return k, False
            return k, True

        for k, ok in self._map(retrain, sorted(local)):
            self.counters["retrain_calls"] += 1
            if not ok:
                del local[k]
                dropped.append(k)

    def run(
        self, server: ServerState, on_round: Callable[[RoundResult, ServerState], None] | None = None
    ) -> list[RoundResult]:
        history = []
        while server.round < self.schedule.total_rounds:
            result = self.run_round(server)
            history.append(result)
            if on_round is not None:
                on_round(result, server)
        return history


def run_round(server: ServerState, federation: Federation) -> RoundResult:
    return federation.run_round(server)
