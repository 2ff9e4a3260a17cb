"""Plain FedAvg, written as a standalone loop so it can serve as a reference."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .fedcore import STREAM_CLIENT_TRAIN, STREAM_SAMPLING, aggregate_models, sample_clients
from .model import StudentModel, TrainConfig, train_epochs
from .numerics import RngStream


def run_fedavg(
    global_model: StudentModel,
    client_data: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    total_rounds: int,
    participation: float,
    seed: int,
    on_round=None,
) -> StudentModel:
    """FedAvg with cross-entropy only; ``on_round(t, model, participants, losses)`` sees each new global model."""
    cfg = replace(cfg, distill_mode="none")
    model = global_model.copy()
    for t in range(total_rounds):
        chosen = sample_clients(len(client_data), participation, RngStream(seed, STREAM_SAMPLING, t))
        updates, sizes, losses = [], [], []
        for k in chosen:
            x, y = client_data[k]
            local = model.copy()
            trace = train_epochs(local, x, y, cfg, RngStream(seed, STREAM_CLIENT_TRAIN + int(k), t))
            updates.append(local)
            sizes.append(len(y))
            if trace:
                losses.append(trace[-1])
        model = aggregate_models(updates, sizes, chosen.tolist())
        if on_round is not None:
            on_round(t, model, chosen.tolist(), losses)
    return model
