"""Build datasets, teacher embeddings and the federation from a config; run and record."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from . import semantics as S
from .baselines import run_fedavg
from .config import ExperimentConfig
from .errors import ConfigError
from .evaluation import GroupThresholds, evaluate
from .fedcore import (
    STREAM_DATA,
    STREAM_EMBEDDINGS,
    STREAM_HOLDOUT,
    STREAM_INIT,
    STREAM_LONG_TAIL,
    STREAM_PARTITION,
    STREAM_TEACHER,
    ClientState,
    Federation,
    MixupConfig,
    RoundResult,
    RoundSchedule,
    ServerState,
)
from .model import StudentModel, TrainConfig, init_model, save_checkpoint, teacher_logits
from .numerics import RngStream

log = logging.getLogger(__name__)


@dataclass
class Workspace:
    """Materialised inputs of one run."""

    train: D.Dataset
    test: D.Dataset
    partition: D.Partition
    label_vectors: np.ndarray | None
    sample_vectors: np.ndarray | None


@dataclass
class RunSummary:
    run_id: str
    config: str
    report: dict
    metrics_path: str
    checkpoint_path: str
    seconds: float

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "final": self.report,
            "metrics_path": self.metrics_path,
            "checkpoint_path": self.checkpoint_path,
            "wall_seconds": self.seconds,
        }


def worker_threads() -> int:
    raw = os.environ.get("FEDSM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDSM_THREADS must be an integer, got {raw!r}") from None


def synthesize(cfg: ExperimentConfig) -> Workspace:
    seed = cfg["seed"]
    C, m = cfg["data.classes"], cfg["data.dim"]
    labels = S.make_label_embeddings(
        C, m, RngStream(seed, STREAM_EMBEDDINGS), cfg["data.embedding_groups"], cfg["data.embedding_within"]
    )
    test_n = cfg["data.test_per_class"]
    full = D.generate_synthetic(
        C, m, cfg["data.head_count"] + test_n, labels, cfg["data.spread"], cfg["data.noise"],
        RngStream(seed, STREAM_DATA),
    )
    pool, test = D.holdout_split(full, test_n, RngStream(seed, STREAM_HOLDOUT))
    if not cfg["data.balanced_test"]:
        # test set follows the training profile
        profile = D.LongTailSpec(cfg["data.imbalance_factor"], test_n)
        test = D.apply_long_tail(test, profile, RngStream(seed, STREAM_HOLDOUT, 1))
    spec = D.LongTailSpec(cfg["data.imbalance_factor"], cfg["data.head_count"])
    train = D.apply_long_tail(pool, spec, RngStream(seed, STREAM_LONG_TAIL))
    partition = D.dirichlet_partition(
        train, cfg["partition.clients"], cfg["partition.alpha"], RngStream(seed, STREAM_PARTITION),
        cfg["partition.min_per_client"],
    )
    samples = S.make_sample_embeddings(
        train.features, cfg["data.spread"], cfg["data.teacher_noise"], RngStream(seed, STREAM_TEACHER)
    )
    return Workspace(train, test, partition, labels, samples)


def load_workspace(cfg: ExperimentConfig) -> Workspace:
    seed = cfg["seed"]
    ds = D.load_dataset(cfg["data.dataset_path"])
    if cfg["data.test_path"]:
        train, test = ds, D.load_dataset(cfg["data.test_path"])
    else:
        train, test = D.holdout_split(ds, cfg["data.test_per_class"], RngStream(seed, STREAM_HOLDOUT))
    if cfg["data.partition_path"]:
        partition = D.load_partition(cfg["data.partition_path"], train)
    else:
        partition = D.dirichlet_partition(
            train, cfg["partition.clients"], cfg["partition.alpha"],
            RngStream(seed, STREAM_PARTITION), cfg["partition.min_per_client"],
        )
    labels = S.load_vectors(cfg["data.embeddings_path"]) if cfg["data.embeddings_path"] else None
    samples = None
    if cfg["data.sample_embeddings_path"]:
        samples = S.load_vectors(cfg["data.sample_embeddings_path"], len(train))
    return Workspace(train, test, partition, labels, samples)


def build_workspace(cfg: ExperimentConfig) -> Workspace:
    return synthesize(cfg) if cfg["data.source"] == "synthetic" else load_workspace(cfg)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        lr_local=cfg["train.lr_local"],
        lr_retrain=cfg["train.lr_retrain"],
        batch_size=cfg["train.batch_size"],
        epochs_per_round=cfg["train.local_epochs"],
        distill_mode=cfg["train.distill"] if cfg["method"] == "fedsm" else "none",
        teacher_logit_scale=cfg["train.teacher_scale"],
    )


def initial_model(cfg: ExperimentConfig, ws: Workspace) -> StudentModel:
    d = cfg["model.feature_dim"]
    if d == 0:
        d = ws.label_vectors.shape[1] if ws.label_vectors is not None else ws.train.dim
    return init_model(ws.train.dim, cfg.hidden, d, ws.train.num_classes, RngStream(cfg["seed"], STREAM_INIT))


def build_federation(cfg: ExperimentConfig, ws: Workspace, threads: int = 1) -> Federation:
    tcfg = train_config(cfg)
    q = h = None
    if tcfg.distill_mode != "none":
        if ws.sample_vectors is None:
            raise ConfigError("distillation needs per-sample teacher embeddings")
        h = ws.sample_vectors
        if tcfg.distill_mode == "kl":
            if ws.label_vectors is None:
                raise ConfigError("kl distillation needs label embeddings")
            q = teacher_logits(h, ws.label_vectors, tcfg.teacher_logit_scale)
    clients = []
    for k, idx in enumerate(ws.partition.assignment):
        clients.append(
            ClientState(
                client_id=k,
                x=ws.train.features[idx],
                y=ws.train.labels[idx],
                teacher_logits=None if q is None else q[idx],
                teacher_features=None if h is None else h[idx],
            )
        )
    relevance = None
    if ws.label_vectors is not None:
        relevance = S.build_relevance(
            S.EmbeddingTable(ws.label_vectors),
            cfg["relevance.similarity"],
            cfg["relevance.transform"],
            cfg["relevance.temperature"],
        )
    schedule = RoundSchedule(
        cfg["schedule.rounds"],
        cfg["schedule.retraining_rounds"] if cfg["method"] == "fedsm" else 0,
        cfg["schedule.participation"],
        cfg["schedule.retrain_epochs"],
    )
    mixup = MixupConfig(
        cfg["mixup.lambda_lo"],
        cfg["mixup.lambda_hi"],
        cfg["mixup.per_class"],
        S.SelectionPolicy(cfg["relevance.mode"], cfg["relevance.temperature"]),
        cfg["mixup.source"],
    )
    return Federation(
        clients=clients,
        num_classes=ws.train.num_classes,
        train_cfg=tcfg,
        mixup_cfg=mixup,
        schedule=schedule,
        relevance=relevance,
        seed=cfg["seed"],
        x_test=ws.test.features,
        y_test=ws.test.labels,
        train_counts=ws.train.class_counts,
        thresholds=GroupThresholds(cfg["eval.many_min"], cfg["eval.few_max"]),
        threads=threads,
    )


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int | None = None) -> RunSummary:
    """Run one configured experiment and write config echo, metrics, summary and checkpoint."""
    cfg.validate()
    threads = worker_threads() if threads is None else threads
    out = Path(out_dir or cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.serialize()
    run_id = hashlib.sha1(echo.encode()).hexdigest()[:12]
    (out / "config.txt").write_text(echo, encoding="utf-8")
    metrics_path = out / "metrics.jsonl"
    start = time.perf_counter()

    ws = build_workspace(cfg)
    model = initial_model(cfg, ws)
    fed = build_federation(cfg, ws, threads)

    with open(metrics_path, "w", encoding="utf-8") as sink:
        if cfg["method"] == "fedavg":

            def on_fedavg_round(t, global_model, participants, losses):
                res = RoundResult(
                    round=t,
                    participants=participants,
                    dropped=[],
                    mean_local_loss=float(np.mean(losses)) if losses else None,
                    retrained=False,
                    prototype_uploads=0,
                    report=fed.evaluate(global_model),
                )
                sink.write(_dump(res.metrics()) + "\n")

            final = run_fedavg(
                model,
                [(c.x, c.y) for c in fed.clients],
                fed.train_cfg,
                fed.schedule.total_rounds,
                fed.schedule.participation,
                cfg["seed"],
                on_fedavg_round,
            )
        else:
            server = ServerState(model, ws.train.num_classes)
            fed.run(server, lambda res, _s: sink.write(_dump(res.metrics()) + "\n"))
            final = server.model

    report = evaluate(final, ws.test.features, ws.test.labels, ws.train.class_counts, fed.thresholds)
    ckpt = out / "model.bin"
    save_checkpoint(ckpt, final)
    summary = RunSummary(
        run_id=run_id,
        config=echo,
        report=report.to_dict(),
        metrics_path=str(metrics_path),
        checkpoint_path=str(ckpt),
        seconds=time.perf_counter() - start,
    )
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    log.info("run %s finished in %.1fs: acc %.4f", run_id, summary.seconds, report.overall_acc)
    return summary


def write_generated(cfg: ExperimentConfig, out_dir) -> tuple[Workspace, dict[str, Path]]:
    """Materialise the synthetic inputs in the on-disk formats."""
    cfg.validate()
    ws = synthesize(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "dataset": out / "train.txt",
        "test": out / "test.txt",
        "partition": out / "partition.txt",
        "embeddings": out / "label_embeddings.txt",
        "sample_embeddings": out / "sample_embeddings.txt",
    }
    D.save_dataset(paths["dataset"], ws.train)
    D.save_dataset(paths["test"], ws.test)
    D.save_partition(paths["partition"], ws.partition)
    S.save_embeddings(paths["embeddings"], ws.label_vectors)
    S.save_embeddings(paths["sample_embeddings"], ws.sample_vectors)
    return ws, paths
