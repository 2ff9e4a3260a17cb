from __future__ import annotations

import pytest

from fedsm.config import ExperimentConfig

TINY = {
    "data.classes": 4,
    "data.dim": 6,
    "data.head_count": 60,
    "data.imbalance_factor": 10.0,
    "data.test_per_class": 10,
    "partition.clients": 4,
    "schedule.rounds": 4,
    "schedule.retraining_rounds": 2,
    "schedule.participation": 0.5,
    "schedule.retrain_epochs": 2,
    "mixup.per_class": 10,
    "train.local_epochs": 1,
    "model.hidden": "8",
    "data.embedding_groups": 2,
}


@pytest.fixture
def tiny_config():
    def make(**overrides):
        return ExperimentConfig({**TINY, **overrides}).validate()

    return make


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
