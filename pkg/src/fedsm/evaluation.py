"""Top-1 accuracy overall, per class and per frequency group."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigError, DataError
from .model import StudentModel, forward

GROUPS = ("many", "medium", "few")


@dataclass(frozen=True)
class GroupThresholds:
    many_min: int = 100  # many: N_c > many_min
    few_max: int = 20  # few:  N_c < few_max

    def __post_init__(self):
        if self.few_max > self.many_min:
            raise ConfigError("few_max must not exceed many_min")

    def group_of(self, count: int) -> str:
        if count > self.many_min:
            return "many"
        if count < self.few_max:
            return "few"
        return "medium"


@dataclass
class EvalReport:
    overall_acc: float
    many_acc: float | None
    medium_acc: float | None
    few_acc: float | None
    per_class_acc: list[float | None]
    confusion: list[list[int]]
    groups: list[str]

    def group_acc(self, name: str) -> float | None:
        return getattr(self, f"{name}_acc")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def confusion_csv(self) -> str:
        n = len(self.confusion)
        lines = ["true\\pred," + ",".join(str(j) for j in range(n))]
        lines += [f"{i}," + ",".join(str(v) for v in row) for i, row in enumerate(self.confusion)]
        return "\n".join(lines) + "\n"


def predict(model: StudentModel, x) -> np.ndarray:
    """Argmax of the logits; ties go to the lowest class id."""
    _, logits = forward(model, np.atleast_2d(x))
    return np.argmax(logits, axis=1)


def evaluate_predictions(
    predictions, labels, train_counts, thresholds: GroupThresholds | None = None
) -> EvalReport:
    thresholds = thresholds or GroupThresholds()
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    train_counts = np.asarray(train_counts)
    num_classes = len(train_counts)
    if labels.size == 0:
        raise DataError("empty test set")
    if predictions.shape != labels.shape:
        raise DataError("one prediction per test label required")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    correct = np.diag(confusion)
    per_class = [
        float(Fraction(int(correct[c]), int(support[c]))) if support[c] else None
        for c in range(num_classes)
    ]
    groups = [thresholds.group_of(int(n)) for n in train_counts]
    group_acc = {}
    for name in GROUPS:
        accs = [per_class[c] for c in range(num_classes) if groups[c] == name and per_class[c] is not None]
        group_acc[name] = float(np.mean(accs)) if accs else None
    return EvalReport(
        overall_acc=float(Fraction(int(correct.sum()), int(labels.size))),
        many_acc=group_acc["many"],
        medium_acc=group_acc["medium"],
        few_acc=group_acc["few"],
        per_class_acc=per_class,
        confusion=confusion.tolist(),
        groups=groups,
    )


def evaluate(
    model: StudentModel, x, labels, train_counts, thresholds: GroupThresholds | None = None
) -> EvalReport:
    return evaluate_predictions(predict(model, x), labels, train_counts, thresholds)
