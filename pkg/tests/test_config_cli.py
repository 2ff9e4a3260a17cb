import csv
import json

import pytest

from fedsm.cli import main
from fedsm.config import DEFAULTS, PRESETS, ExperimentConfig
from fedsm.errors import ConfigError

from .conftest import TINY


def write_config(path, extra=None):
    lines = ["# tiny smoke config"] + [f"{k} = {v}" for k, v in {**TINY, **(extra or {})}.items()]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_parse_and_round_trip(tmp_path):
    cfg = ExperimentConfig.from_file(write_config(tmp_path / "c.txt", {"mixup.lambda_lo": "0.7  # inline"}))
    assert cfg["mixup.lambda_lo"] == 0.7
    assert cfg["data.classes"] == 4
    again = ExperimentConfig.from_text(cfg.serialize())
    assert again == cfg
    assert again.serialize() == cfg.serialize()


def test_preset_layering():
    desk = ExperimentConfig(preset="desk")
    assert desk["schedule.rounds"] == 60 and desk["schedule.retraining_rounds"] == 15
    full = ExperimentConfig(preset="paper")
    assert full["schedule.rounds"] == 200 and full["schedule.retraining_rounds"] == 50
    assert full["partition.clients"] == 20 and full["schedule.participation"] == 0.4
    assert full["mixup.per_class"] == 100 and full["train.batch_size"] == 32
    assert (full["mixup.lambda_lo"], full["mixup.lambda_hi"]) == (0.65, 0.90)
    assert (full["train.lr_local"], full["train.lr_retrain"]) == (0.1, 0.01)
    assert ExperimentConfig({"schedule.rounds": 5}, preset="desk")["schedule.rounds"] == 5
    assert set(PRESETS["desk"]) <= set(DEFAULTS)


@pytest.mark.parametrize(
    "values",
    [
        {"nonsense.key": 1},
        {"data.classes": "ten"},
        {"relevance.mode": "greedy"},
        {"schedule.retraining_rounds": 300},
        {"mixup.lambda_lo": 0.9, "mixup.lambda_hi": 0.5},
        {"schedule.participation": 0.0},
        {"data.source": "files"},
    ],
)
def test_invalid_configs(values):
    with pytest.raises(ConfigError):
        ExperimentConfig(values).validate()


def test_run_smoke_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.txt", {"schedule.rounds": 1, "schedule.retraining_rounds": 1, "partition.clients": 2})
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    for name in ("config.txt", "metrics.jsonl", "summary.json", "model.bin"):
        assert (tmp_path / "a" / name).exists()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["config"] == (tmp_path / "a" / "config.txt").read_text()
    record = json.loads((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()[0])
    assert {"round", "participants", "mean_local_loss", "test_acc", "many_acc", "medium_acc", "few_acc"} <= set(record)


def test_config_echo_reexecutes(tmp_path):
    cfg = write_config(tmp_path / "c.txt")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(tmp_path / "a" / "config.txt"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_seed_override_changes_run(tmp_path):
    cfg = write_config(tmp_path / "c.txt")
    main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "b")])
    assert "seed = 9" in (tmp_path / "b" / "config.txt").read_text()
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "b" / "metrics.jsonl").read_bytes()


def test_fedavg_equals_fedsm_without_retraining(tmp_path):
    base = {"schedule.retraining_rounds": 0, "train.distill": "none"}
    a = write_config(tmp_path / "a.txt", {**base, "method": "fedavg"})
    b = write_config(tmp_path / "b.txt", {**base, "method": "fedsm"})
    assert main(["run", "--config", str(a), "--out", str(tmp_path / "ra")]) == 0
    assert main(["run", "--config", str(b), "--out", str(tmp_path / "rb")]) == 0
    assert (tmp_path / "ra" / "metrics.jsonl").read_bytes() == (tmp_path / "rb" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "ra" / "model.bin").read_bytes() == (tmp_path / "rb" / "model.bin").read_bytes()


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("relevance.mode = greedy\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "relevance.mode" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.txt")]) == 2


def test_unknown_sweep_axis_exit_code(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["sweep", "--config", str(write_config(tmp_path / "c.txt")), "--axis", "depth", "--values", "1"])
    assert info.value.code == 2


def test_runtime_error_exit_code(tmp_path):
    # no client ever sees class 3, so retraining has no prototype for it
    cfg = write_config(tmp_path / "c.txt")
    import fedsm.fedcore as F

    real = F.aggregate_prototypes

    def lossy(reports, num_classes, dim):
        protos, mask, totals = real(reports, num_classes, dim)
        mask[3] = False
        return protos, mask, totals

    F.aggregate_prototypes = lossy
    try:
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    finally:
        F.aggregate_prototypes = real


def test_sweep_lambda_csv(tmp_path):
    cfg = write_config(tmp_path / "c.txt", {"schedule.rounds": 2, "schedule.retraining_rounds": 1})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg), "--axis", "lambda", "--values", "0.2,0.5,0.8", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "sweep_lambda.csv")))
    assert rows[0] == ["axis", "value", "seed", "overall", "many", "medium", "few"]
    assert [r[1] for r in rows[1:]] == ["0.2", "0.5", "0.8"]
    echo = (out / "lambda=0.5" / "seed=0" / "config.txt").read_text()
    assert "mixup.lambda_lo = 0.5" in echo and "mixup.lambda_hi = 0.5" in echo


def test_sweep_mode_and_s_axes(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.txt", {"schedule.rounds": 2, "schedule.retraining_rounds": 1})
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg), "--axis", "mode", "--values", "probabilistic,deterministic,random", "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "sweep_mode.csv")))
    assert [r[1] for r in rows[1:]] == ["probabilistic", "deterministic", "random"]
    assert main(["sweep", "--config", str(cfg), "--axis", "S", "--values", "5,10", "--seeds", "0,1", "--out", str(out)]) == 0
    assert len(list(csv.reader(open(out / "sweep_S.csv")))) == 5
    assert "monotone nondecreasing in S" in capsys.readouterr().out


def test_gen_writes_files(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("data.head_count = 1000\ndata.imbalance_factor = 100\ndata.test_per_class = 10\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g1")]) == 0
    out = capsys.readouterr().out
    counts = [int(line.split()[1]) for line in out.splitlines()[1:11]]
    assert counts == [1000, 599, 359, 215, 129, 77, 46, 28, 17, 10]
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g2")]) == 0
    for name in ("train.txt", "test.txt", "partition.txt", "label_embeddings.txt", "sample_embeddings.txt"):
        assert (tmp_path / "g1" / name).read_bytes() == (tmp_path / "g2" / name).read_bytes()


def test_gen_balanced(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("data.head_count = 50\ndata.imbalance_factor = 1\ndata.test_per_class = 5\n")
    assert main(["gen", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    counts = [int(line.split()[1]) for line in capsys.readouterr().out.splitlines()[1:11]]
    assert counts == [50] * 10


def test_run_from_generated_files(tmp_path):
    gen_cfg = write_config(tmp_path / "g.txt")
    assert main(["gen", "--config", str(gen_cfg), "--out", str(tmp_path / "g")]) == 0
    g = tmp_path / "g"
    cfg = write_config(
        tmp_path / "c.txt",
        {
            "data.source": "files",
            "data.dataset_path": g / "train.txt",
            "data.test_path": g / "test.txt",
            "data.partition_path": g / "partition.txt",
            "data.embeddings_path": g / "label_embeddings.txt",
            "data.sample_embeddings_path": g / "sample_embeddings.txt",
        },
    )
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "files")]) == 0
    assert main(["run", "--config", str(gen_cfg), "--out", str(tmp_path / "synth")]) == 0
    # the files carry the same inputs, so the runs agree
    assert (tmp_path / "files" / "model.bin").read_bytes() == (tmp_path / "synth" / "model.bin").read_bytes()


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--instances", "1", "--dim", "4", "--hidden", "5", "--classes", "3"]) == 0
    out = capsys.readouterr().out
    assert out.count("[ok]") == 3
