"""Client-side local training (the InstructionTuning loop)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from aws_lambda_powertools import Logger

from taskfed.exceptions import EmptyDataset, InvalidConfig, NonFiniteLoss
from taskfed.model import AdaptedModel, ModelSpec, backward, build_model, forward_loss, sgd_step, trainable_vector
from taskfed.tasks import ClientDataset

logger = Logger(service="taskfed", child=True)

DIVERGENCE_LIMIT = 1e6


@dataclass(eq=False)
class ClientState:
    id: int
    model: AdaptedModel
    data: ClientDataset
    rng_stream: np.random.Generator
    local_lr: float
    batch_size: int
    _order: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64), repr=False)
    _cursor: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be positive, got {self.batch_size}")
        if self.local_lr < 0:
            raise InvalidConfig(f"local_lr must be non-negative, got {self.local_lr}")

    def next_batch(self) -> np.ndarray:
        """Indices of the next minibatch; reshuffles when an epoch is used up.

        The position survives across rounds, so consecutive rounds continue
        one shuffled stream. The last batch of an epoch may be short.
        """
        n = self.data.n_train
        if self._cursor >= self._order.size:
            self._order = self.rng_stream.permutation(n)
            self._cursor = 0
        batch = self._order[self._cursor : self._cursor + self.batch_size]
        self._cursor += batch.size
        return batch


def _ensure_data(s: ClientState) -> None:
    if s.data.n_train == 0 or s.data.X_test.shape[0] == 0:
        raise EmptyDataset(f"client {s.id} has an empty train or test split", client_id=s.id)


def instruction_tuning(s: ClientState, R: int) -> np.ndarray:
    """R minibatch SGD steps on the adapter parameters; returns the new delta."""
    if R < 1:
        raise InvalidConfig(f"local steps must be at least 1, got {R}")
    _ensure_data(s)
    X, y = s.data.X_train, s.data.y_train
    for step in range(R):
        batch = s.next_batch()
        try:
            loss, cache = forward_loss(s.model, X[batch], y[batch])
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"client {s.id} step {step}: {exc}", client_id=s.id) from exc
        if loss > DIVERGENCE_LIMIT:
            raise NonFiniteLoss(f"client {s.id} step {step}: loss {loss:.3e} diverged", client_id=s.id)
        sgd_step(s.model, backward(s.model, cache), s.local_lr)
    logger.debug("Local training finished", extra={"client_id": s.id, "steps": R, "last_batch_loss": loss})
    return trainable_vector(s.model)


def evaluate(s: ClientState) -> tuple[float, float]:
    """Full-split mean train and test losses; the model is not modified."""
    _ensure_data(s)
    train_loss, _ = forward_loss(s.model, s.data.X_train, s.data.y_train)
    test_loss, _ = forward_loss(s.model, s.data.X_test, s.data.y_test)
    return train_loss, test_loss


def build_clients(
    spec: ModelSpec,
    datasets: list[ClientDataset],
    *,
    base_seed: int,
    adapter_seed: int,
    client_seed: int,
    local_lr: float,
    batch_size: int,
    init_scale: float = 0.02,
) -> list[ClientState]:
    """One client per dataset, all sharing the same base and initial adapter."""
    return [
        ClientState(
            id=k,
            model=build_model(spec, base_seed, adapter_seed, init_scale=init_scale),
            data=data,
            rng_stream=np.random.default_rng([client_seed, k]),
            local_lr=local_lr,
            batch_size=batch_size,
        )
        for k, data in enumerate(datasets)
    ]
