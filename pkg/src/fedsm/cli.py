"""Command line entry point: ``fedsm run|sweep|gen|gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, _coerce
from .errors import ConfigError, FedSMError
from .experiment import run_experiment, write_generated
from .model import TrainConfig, grad_check_report, init_model
from .numerics import RngStream

SWEEP_AXES = {
    "lambda": ("mixup.lambda_lo", "mixup.lambda_hi"),
    "S": ("mixup.per_class",),
    "tau": ("relevance.temperature",),
    "similarity": ("relevance.similarity",),
    "mode": ("relevance.mode",),
    "IF": ("data.imbalance_factor",),
    "epochs": ("schedule.retrain_epochs",),
}

SWEEP_COLUMNS = ["axis", "value", "seed", "overall", "many", "medium", "few"]


def _load_config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config:
        cfg = ExperimentConfig.from_file(args.config, args.preset, overrides)
    else:
        cfg = ExperimentConfig(overrides, args.preset)
    return cfg.validate()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg["output.dir"])


def cmd_run(args) -> int:
    cfg = _load_config(args)
    summary = run_experiment(cfg, _out_dir(args, cfg))
    rep = summary.report
    print(f"run {summary.run_id}: overall={rep['overall_acc']:.4f} few={rep['few_acc']}")
    print(f"metrics: {summary.metrics_path}")
    return 0


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def cmd_sweep(args) -> int:
    base = _load_config(args)
    keys = SWEEP_AXES[args.axis]
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values: need at least one value")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base["seed"]]
    root = _out_dir(args, base)
    rows = []
    for raw in values:
        for seed in seeds:
            cfg = base.replace(**{k: _coerce(k, raw) for k in keys}, seed=seed).validate()
            summary = run_experiment(cfg, root / f"{args.axis}={raw}" / f"seed={seed}")
            rep = summary.report
            rows.append([args.axis, raw, seed, *(_fmt(rep[f"{g}_acc"]) for g in ("overall", "many", "medium", "few"))])
            print(f"{args.axis}={raw} seed={seed}: overall={rep['overall_acc']:.4f}", flush=True)
    root.mkdir(parents=True, exist_ok=True)
    path = root / f"sweep_{args.axis}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        writer.writerows(rows)
    means = [np.mean([float(r[3]) for r in rows if r[1] == v]) for v in values]
    print(f"wrote {path}")
    try:
        numeric = [float(v) for v in values]
    except ValueError:
        numeric = None
    if numeric is not None:
        ordered = [m for _, m in sorted(zip(numeric, means))]
        mono = all(b >= a for a, b in zip(ordered, ordered[1:]))
        print(f"mean overall accuracy monotone nondecreasing in {args.axis}: {'yes' if mono else 'no'}")
    return 0


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    ws, paths = write_generated(cfg, _out_dir(args, cfg))
    print("class  count")
    for c, n in enumerate(ws.train.class_counts):
        print(f"{c:5d}  {int(n)}")
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_gradcheck(args) -> int:
    worst_all = 0.0
    for mode in ("kl", "mse", "none"):
        cfg = TrainConfig(distill_mode=mode)
        worst = 0.0
        for i in range(args.instances):
            rng = RngStream(args.seed if args.seed is not None else 0, 9000 + i)
            model = init_model(args.dim, [args.hidden], args.dim, args.classes, rng)
            x = rng.gaussians((args.batch, args.dim))
            y = rng.integers(0, args.classes, args.batch)
            q = 3.0 * rng.gaussians((args.batch, args.classes))
            h = rng.gaussians((args.batch, args.dim))
            rep = grad_check_report(model, x, y, cfg, args.epsilon, q, h)
            worst = max(worst, rep.max_rel_error)
        status = "ok" if worst < args.tolerance else "FAIL"
        print(f"{mode:5s} max relative error {worst:.3e} [{status}]")
        worst_all = max(worst_all, worst)
    return 0 if worst_all < args.tolerance else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", choices=["desk", "paper"], default=None)

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per axis value")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen", help="write synthetic dataset, partition and embeddings")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("gradcheck", help="finite-difference check of the student gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--batch", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FedSMError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
