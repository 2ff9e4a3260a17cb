"""Flat ``section.key = value`` experiment configs with presets.

Lines are ``key = value``; ``#`` starts a comment. Every key has a typed
default; unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

from .errors import ConfigError

# Full-scale defaults. Types are taken from the default values.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "method": "fedsm",
    "data.source": "synthetic",
    "data.classes": 10,
    "data.dim": 16,
    "data.head_count": 1000,
    "data.imbalance_factor": 100.0,
    "data.test_per_class": 100,
    "data.balanced_test": True,
    "data.spread": 2.0,
    "data.noise": 1.0,
    "data.embedding_groups": 5,
    "data.embedding_within": 0.5,
    "data.teacher_noise": 0.1,
    "data.dataset_path": "",
    "data.test_path": "",
    "data.partition_path": "",
    "data.embeddings_path": "",
    "data.sample_embeddings_path": "",
    "partition.clients": 20,
    "partition.alpha": 0.5,
    "partition.min_per_client": 2,
    "schedule.rounds": 200,
    "schedule.retraining_rounds": 50,
    "schedule.participation": 0.4,
    "schedule.retrain_epochs": 50,
    "mixup.lambda_lo": 0.65,
    "mixup.lambda_hi": 0.90,
    "mixup.per_class": 100,
    "mixup.source": "sample",
    "relevance.similarity": "cosine",
    "relevance.transform": "softmax",
    "relevance.mode": "probabilistic",
    "relevance.temperature": 0.5,
    "train.distill": "kl",
    "train.teacher_scale": 10.0,
    "train.lr_local": 0.1,
    "train.lr_retrain": 0.01,
    "train.batch_size": 32,
    "train.local_epochs": 10,
    "model.hidden": "64",
    "model.feature_dim": 0,
    "eval.many_min": 100,
    "eval.few_max": 20,
    "output.dir": "runs",
}

PRESETS: dict[str, dict[str, Any]] = {
    "paper": {},
    "desk": {
        "schedule.rounds": 60,
        "schedule.retraining_rounds": 15,
        "schedule.retrain_epochs": 50,
        "train.local_epochs": 10,
    },
}

CHOICES = {
    "method": ("fedsm", "fedavg"),
    "data.source": ("synthetic", "files"),
    "mixup.source": ("sample", "prototype"),
    "relevance.similarity": ("cosine", "l1", "l2", "dot"),
    "relevance.transform": ("softmax", "identity"),
    "relevance.mode": ("probabilistic", "deterministic", "random"),
    "train.distill": ("kl", "mse", "none"),
}

PATH_KEYS = (
    "data.dataset_path",
    "data.test_path",
    "data.partition_path",
    "data.embeddings_path",
    "data.sample_embeddings_path",
)


def _coerce(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return str(raw).strip()


def parse_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value.strip())
    return out


class ExperimentConfig:
    """Resolved config: defaults < preset < file < overrides."""

    def __init__(self, values: dict[str, Any] | None = None, preset: str | None = None):
        if preset is not None and preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged = dict(DEFAULTS)
        merged.update(PRESETS.get(preset or "paper", {}))
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, value)
        self.values = merged

    @classmethod
    def from_file(cls, path, preset: str | None = None, overrides: dict | None = None):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values = parse_text(text)
        values.update(overrides or {})
        return cls(values, preset)

    @classmethod
    def from_text(cls, text: str, preset: str | None = None) -> "ExperimentConfig":
        return cls(parse_text(text), preset)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def replace(self, **dotted) -> "ExperimentConfig":
        """Copy with overrides; pass dotted keys via ``**{"a.b": v}``."""
        vals = dict(self.values)
        vals.update(dotted)
        return ExperimentConfig(vals)

    def serialize(self) -> str:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @property
    def hidden(self) -> list[int]:
        text = self.values["model.hidden"].strip()
        if not text:
            return []
        try:
            return [int(v) for v in text.split(",")]
        except ValueError:
            raise ConfigError(f"model.hidden: expected comma-separated ints, got {text!r}") from None

    def validate(self) -> "ExperimentConfig":
        v = self.values
        for key, options in CHOICES.items():
            if v[key] not in options:
                raise ConfigError(f"{key}: {v[key]!r} is not one of {', '.join(options)}")
        positive = [
            "data.classes", "data.dim", "data.head_count", "partition.clients",
            "mixup.per_class", "train.batch_size", "data.spread", "partition.alpha",
            "relevance.temperature", "train.teacher_scale",
        ]
        for key in positive:
            if v[key] <= 0:
                raise ConfigError(f"{key}: must be positive, got {v[key]}")
        nonneg = [
            "seed", "data.noise", "data.teacher_noise", "data.test_per_class",
            "schedule.rounds", "schedule.retraining_rounds", "schedule.retrain_epochs",
            "train.local_epochs", "train.lr_local", "train.lr_retrain", "model.feature_dim",
            "partition.min_per_client",
        ]
        for key in nonneg:
            if v[key] < 0:
                raise ConfigError(f"{key}: must be nonnegative, got {v[key]}")
        if v["data.classes"] < 2:
            raise ConfigError("data.classes: need at least 2")
        if v["data.imbalance_factor"] < 1:
            raise ConfigError("data.imbalance_factor: must be >= 1")
        if not 0 < v["schedule.participation"] <= 1:
            raise ConfigError("schedule.participation: must lie in (0, 1]")
        if v["schedule.retraining_rounds"] > v["schedule.rounds"]:
            raise ConfigError("schedule.retraining_rounds: exceeds schedule.rounds")
        if not 0 <= v["mixup.lambda_lo"] <= v["mixup.lambda_hi"] <= 1:
            raise ConfigError("mixup.lambda_lo/lambda_hi: need 0 <= lo <= hi <= 1")
        if v["eval.few_max"] > v["eval.many_min"]:
            raise ConfigError("eval.few_max: must not exceed eval.many_min")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError("model.hidden: widths must be positive")
        if v["data.source"] == "files":
            if not v["data.dataset_path"]:
                raise ConfigError("data.dataset_path: required when data.source = files")
            for key in PATH_KEYS:
                if v[key] and not Path(v[key]).is_file():
                    raise ConfigError(f"{key}: file {v[key]!r} does not exist")
            needs_teacher = v["method"] == "fedsm" and v["train.distill"] != "none"
            if needs_teacher and not v["data.sample_embeddings_path"]:
                raise ConfigError("data.sample_embeddings_path: required for distillation")
            if v["method"] == "fedsm" and not v["data.embeddings_path"]:
                needs_rel = v["schedule.retraining_rounds"] > 0 or v["train.distill"] == "kl"
                if needs_rel:
                    raise ConfigError("data.embeddings_path: required for fedsm")
        return self
