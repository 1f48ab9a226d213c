"""Server orchestration: sampling, aggregation and the communication-round loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from aws_lambda_powertools import Logger

from taskfed.client import ClientState, instruction_tuning
from taskfed.exceptions import (
    InvalidConfig,
    LengthMismatch,
    MissingClient,
    RoundFailed,
    TaskFedError,
    ZeroDegreeGraph,
)
from taskfed.graph import TaskGraph, apply_extended_laplacian, safe_step_bound
from taskfed.metrics import RoundReport, evaluate_clients, objective_from_losses, round_comm_cost
from taskfed.model import load_trainable

logger = Logger(service="taskfed", child=True)

StrategyKind = Literal["mira", "fedavg", "local_only"]
NeighborMode = Literal["all_stale", "sampled_only"]

STRATEGY_KINDS = ("mira", "fedavg", "local_only")
NEIGHBOR_MODES = ("all_stale", "sampled_only")

Deltas = dict[int, np.ndarray]
RoundHook = Callable[[RoundReport], None]


@dataclass(frozen=True)
class AggregationStrategy:
    kind: StrategyKind
    eta: float = 1.0
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidConfig(f"strategy must be one of {STRATEGY_KINDS}, got {self.kind!r}")
        if self.lam < 0:
            raise InvalidConfig(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "mira" and self.eta <= 0:
            raise InvalidConfig(f"mira needs a positive server learning rate, got eta={self.eta}")


@dataclass(eq=False)
class ServerState:
    graph: TaskGraph
    strategy: AggregationStrategy
    deltas: Deltas
    train_sizes: np.ndarray
    sample_fraction: float
    sampling_seed: int
    neighbor_mode: NeighborMode = "all_stale"
    round: int = 0

    def __post_init__(self):
        if not 0.0 < self.sample_fraction <= 1.0:
            raise InvalidConfig(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise InvalidConfig(f"neighbor_mode must be one of {NEIGHBOR_MODES}, got {self.neighbor_mode!r}")

    @classmethod
    def initial(
        cls,
        graph: TaskGraph,
        strategy: AggregationStrategy,
        initial_delta: np.ndarray,
        train_sizes: Sequence[int],
        sample_fraction: float,
        sampling_seed: int,
        neighbor_mode: NeighborMode = "all_stale",
    ) -> "ServerState":
        """Every client starts from the same ΔW⁽⁰⁾."""
        return cls(
            graph=graph,
            strategy=strategy,
            deltas={k: np.array(initial_delta, dtype=np.float64) for k in range(graph.K)},
            train_sizes=np.asarray(train_sizes),
            sample_fraction=sample_fraction,
            sampling_seed=sampling_seed,
            neighbor_mode=neighbor_mode,
        )

    @property
    def K(self) -> int:
        return self.graph.K


def sample_clients(st: ServerState) -> frozenset[int]:
    """Uniform draw without replacement, a pure function of (seed, round)."""
    size = max(1, int(round(st.sample_fraction * st.K)))
    rng = np.random.default_rng([st.sampling_seed, st.round])
    return frozenset(int(k) for k in rng.choice(st.K, size=size, replace=False))


def _check_fresh(st: ServerState, fresh: Mapping[int, np.ndarray]) -> None:
    unknown = sorted(k for k in fresh if not 0 <= k < st.K)
    if unknown:
        raise MissingClient(f"fresh deltas for unknown clients {unknown}", client_id=unknown[0])
    missing = sorted(k for k in range(st.K) if k not in st.deltas)
    if missing:
        raise MissingClient(f"server holds no delta for clients {missing}", client_id=missing[0])
    sizes = {np.shape(v) for v in fresh.values()} | {np.shape(v) for v in st.deltas.values()}
    if len(sizes) != 1:
        raise LengthMismatch(f"deltas disagree in shape: {sorted(sizes)}")


def mira_aggregate(st: ServerState, fresh: Mapping[int, np.ndarray]) -> Deltas:
    """Laplacian regularization step for the sampled clients.

    new_k = fresh_k - ηλ Σ_ℓ a_kℓ (fresh_k - latest_ℓ), latest_ℓ being the fresh
    delta when ℓ was sampled and the stored one otherwise. All pulls are read
    from pre-update values. Clients outside the sample keep their stored delta.
    """
    _check_fresh(st, fresh)
    step = st.strategy.eta * st.strategy.lam
    out: Deltas = {k: fresh[k] if k in fresh else st.deltas[k] for k in range(st.K)}
    if step == 0.0 or not fresh:
        return out

    graph = st.graph
    if st.neighbor_mode == "sampled_only":
        idx = np.array(sorted(fresh))
        weights = np.zeros_like(graph.weights)
        weights[np.ix_(idx, idx)] = graph.weights[np.ix_(idx, idx)]
        graph = TaskGraph(weights=weights)

    latest = [out[k] for k in range(st.K)]
    pull = apply_extended_laplacian(graph, latest)
    for k in fresh:
        out[k] = fresh[k] - step * pull[k]
    return out


def fedavg_aggregate(st: ServerState, fresh: Mapping[int, np.ndarray]) -> Deltas:
    """Train-size weighted mean of the fresh deltas, sent to every client."""
    _check_fresh(st, fresh)
    if not fresh:
        raise MissingClient("fedavg needs at least one fresh delta")
    ids = sorted(fresh)
    mean = np.average(np.stack([fresh[k] for k in ids]), axis=0, weights=st.train_sizes[ids])
    return {k: mean.copy() for k in range(st.K)}


def aggregate(st: ServerState, fresh: Mapping[int, np.ndarray]) -> Deltas:
    match st.strategy.kind:
        case "mira":
            return mira_aggregate(st, fresh)
        case "fedavg":
            return fedavg_aggregate(st, fresh)
        case _:
            return {k: fresh[k] if k in fresh else st.deltas[k] for k in range(st.K)}


def _warn_unsafe_step(st: ServerState) -> None:
    if st.strategy.kind != "mira":
        return
    step = st.strategy.eta * st.strategy.lam
    try:
        bound = safe_step_bound(st.graph)
    except ZeroDegreeGraph:
        logger.warning("Graph has no edges; the regularization step is a no-op")
        return
    if step > bound:
        logger.warning(
            "eta*lambda exceeds the safe step bound; the regularizer may grow",
            extra={"eta_lambda": step, "safe_bound": bound},
        )


def run(
    T: int,
    clients: Sequence[ClientState],
    st: ServerState,
    hooks: Sequence[RoundHook] = (),
    *,
    local_steps: int,
    parallel_clients: bool = False,
    max_workers: int | None = None,
) -> list[RoundReport]:
    """Run T communication rounds and return one report per round."""
    if T < 1:
        raise InvalidConfig(f"need at least one round, got T={T}")
    if len(clients) != st.K or any(c.id != k for k, c in enumerate(clients)):
        raise MissingClient(f"expected clients 0..{st.K - 1} in order")
    _warn_unsafe_step(st)
    kind = st.strategy.kind
    reports: list[RoundReport] = []
    cum_up = cum_down = 0

    def train(k: int) -> tuple[int, np.ndarray]:
        client = clients[k]
        load_trainable(client.model, st.deltas[k])
        try:
            return k, instruction_tuning(client, local_steps)
        except TaskFedError as exc:
            raise RoundFailed(st.round, k, exc) from exc

    pool = ThreadPoolExecutor(max_workers=max_workers) if parallel_clients else None
    try:
        for t in range(1, T + 1):
            st.round = t
            participants = sorted(range(st.K) if kind == "local_only" else sample_clients(st))
            runner = pool.map if pool is not None else map
            fresh = dict(runner(train, participants))

            try:
                st.deltas = aggregate(st, fresh)
            except TaskFedError as exc:
                raise RoundFailed(t, None, exc) from exc

            for client in clients:
                load_trainable(client.model, st.deltas[client.id])
            try:
                losses = evaluate_clients(clients)
            except TaskFedError as exc:
                raise RoundFailed(t, getattr(exc, "client_id", None), exc) from exc
            J, F, R_value = objective_from_losses(
                losses, [st.deltas[k] for k in range(st.K)], st.graph, st.strategy.lam
            )

            up, down = round_comm_cost(clients[0].model, len(participants), kind)
            cum_up += up
            cum_down += down
            report = RoundReport(
                round=t,
                J=J,
                F=F,
                R_value=R_value,
                per_client=losses,
                sampled=frozenset(participants),
                up_bytes=up,
                down_bytes=down,
                cum_up_bytes=cum_up,
                cum_down_bytes=cum_down,
            )
            reports.append(report)
            for hook in hooks:
                hook(report)
            logger.info(
                "Round complete",
                extra={
                    "strategy": kind,
                    "round": t,
                    "sampled": participants,
                    "J": J,
                    "mean_test": report.mean_test,
                },
            )
    finally:
        if pool is not None:
            pool.shutdown()
    return reports
