"""Objective decomposition, cost accounting and report serialization."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from taskfed.client import ClientState, evaluate
from taskfed.graph import TaskGraph, regularization_value
from taskfed.model import AdaptedModel, trainable_vector

BYTES_PER_PARAM = 8


@dataclass(frozen=True)
class ClientLoss:
    id: int
    train_loss: float
    test_loss: float


@dataclass(frozen=True)
class RoundReport:
    round: int
    J: float
    F: float
    R_value: float
    per_client: tuple[ClientLoss, ...]
    sampled: frozenset[int]
    up_bytes: int
    down_bytes: int
    cum_up_bytes: int
    cum_down_bytes: int

    @property
    def mean_train(self) -> float:
        return float(np.mean([c.train_loss for c in self.per_client]))

    @property
    def mean_test(self) -> float:
        return float(np.mean([c.test_loss for c in self.per_client]))


@dataclass(frozen=True)
class CostModel:
    """Per-client memory footprint C_w + Ĉ_Δw + O, in bytes."""

    bytes_per_param: int
    C_w: int
    C_delta: int
    O: int

    @property
    def memory_total(self) -> int:
        return self.C_w + self.C_delta + self.O


def evaluate_clients(states: Sequence[ClientState]) -> tuple[ClientLoss, ...]:
    return tuple(ClientLoss(s.id, *evaluate(s)) for s in states)


def objective_from_losses(
    losses: Sequence[ClientLoss], deltas: Sequence[np.ndarray], graph: TaskGraph, lam: float
) -> tuple[float, float, float]:
    F = float(sum(c.train_loss for c in losses))
    R_value = regularization_value(graph, list(deltas))
    return F + lam * R_value, F, R_value


def objective(states: Sequence[ClientState], graph: TaskGraph, lam: float) -> tuple[float, float, float]:
    """J = F + λR with F the summed train losses and R over the adapter deltas."""
    deltas = [trainable_vector(s.model) for s in states]
    return objective_from_losses(evaluate_clients(states), deltas, graph, lam)


def round_comm_cost(
    model: AdaptedModel,
    sampled_count: int,
    strategy_kind: str = "mira",
    bytes_per_param: int = BYTES_PER_PARAM,
) -> tuple[int, int]:
    """Upload and download bytes of one round; only ΔW travels, both ways."""
    if strategy_kind == "local_only":
        return 0, 0
    payload = sampled_count * model.trainable_count * bytes_per_param
    return payload, payload


def build_cost_model(
    model: AdaptedModel, bytes_per_param: int = BYTES_PER_PARAM, optimizer_state_bytes: int = 0
) -> CostModel:
    # plain SGD keeps no optimizer state
    return CostModel(
        bytes_per_param=bytes_per_param,
        C_w=model.frozen_count * bytes_per_param,
        C_delta=model.trainable_count * bytes_per_param,
        O=optimizer_state_bytes,
    )


def memory_cost(model: AdaptedModel, cost_model: CostModel | None = None) -> int:
    if cost_model is None:
        cost_model = build_cost_model(model)
    bpp = cost_model.bytes_per_param
    return model.frozen_count * bpp + model.trainable_count * bpp + cost_model.O


CSV_OPTIONS = {"index": False, "float_format": "%.17g", "lineterminator": "\n"}


def write_round_csv(reports: Sequence[RoundReport], path: str | Path) -> None:
    """One row per round; the byte columns are cumulative."""
    rows = [
        {
            "t": r.round,
            "J": r.J,
            "F": r.F,
            "R_value": r.R_value,
            "mean_train": r.mean_train,
            "mean_test": r.mean_test,
            "up_bytes": r.cum_up_bytes,
            "down_bytes": r.cum_down_bytes,
        }
        for r in reports
    ]
    pd.DataFrame(rows).to_csv(path, **CSV_OPTIONS)


def write_client_csv(reports: Sequence[RoundReport], path: str | Path) -> None:
    rows = [
        {
            "t": r.round,
            "client": c.id,
            "train_loss": c.train_loss,
            "test_loss": c.test_loss,
            "sampled_flag": int(c.id in r.sampled),
        }
        for r in reports
        for c in r.per_client
    ]
    pd.DataFrame(rows).to_csv(path, **CSV_OPTIONS)
