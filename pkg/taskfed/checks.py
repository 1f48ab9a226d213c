"""Self-verification suites behind the grad-check and oracle-check commands."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from aws_lambda_powertools import Logger

from taskfed.config import ExperimentConfig
from taskfed.experiment import build_strategy, prepare
from taskfed.graph import (
    TaskGraph,
    apply_extended_laplacian,
    laplacian,
    new_task_graph,
    random_task_graph,
    regularization_value,
    safe_step_bound,
)
from taskfed.model import ACTIVATIONS, HEADS, ModelSpec, backward, build_model, forward_loss, load_trainable
from taskfed.server import AggregationStrategy, ServerState, mira_aggregate, run

logger = Logger(service="taskfed", child=True)

GRAD_TOLERANCE = 1e-6
FD_STEP = 1e-5
FD_GUARD = 1e-8


@dataclass
class ComboResult:
    head: str
    activation: str
    max_error: float = 0.0
    worst: str = ""


@dataclass
class GradCheckReport:
    combos: list[ComboResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(c.max_error for c in self.combos)

    @property
    def passed(self) -> bool:
        return self.max_error < GRAD_TOLERANCE


def _check_model(head: str, activation: str, seed: int, sign_flip: bool) -> list[tuple[float, str]]:
    spec = ModelSpec(layer_dims=(5, 6, 4), rank=2, activation=activation, head=head)
    model = build_model(spec, base_seed=seed, adapter_seed=seed + 1)
    rng = np.random.default_rng([seed, 7])
    theta = rng.normal(0.0, 0.5, size=model.trainable_count)
    X = rng.normal(size=(4, 5))
    y = rng.normal(size=(4, 4)) if head == "mse" else rng.integers(0, 4, size=4).astype(np.float64)

    load_trainable(model, theta)
    _, cache = forward_loss(model, X, y)
    analytic = backward(model, cache)
    if sign_flip:
        for _, factor, sl in model.segments():
            if factor == "A":
                analytic[sl] = -analytic[sl]

    numeric = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += FD_STEP
        load_trainable(model, bumped)
        up, _ = forward_loss(model, X, y)
        bumped[i] -= 2 * FD_STEP
        load_trainable(model, bumped)
        down, _ = forward_loss(model, X, y)
        numeric[i] = (up - down) / (2 * FD_STEP)

    errors = []
    for layer, factor, sl in model.segments():
        a, n = analytic[sl], numeric[sl]
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), FD_GUARD)
        errors.append((float(err), f"layer {layer} {factor}, seed {seed}"))
    return errors


def grad_check(seeds: int = 10, sign_flip: bool = False) -> GradCheckReport:
    """Finite-difference check of the backward pass for every head/activation pair.

    Errors are relative per factor block: ‖a - n‖ / max(‖a‖ + ‖n‖, 1e-8).
    """
    report = GradCheckReport()
    for head, activation in product(HEADS, ACTIVATIONS):
        combo = ComboResult(head, activation)
        for seed in range(seeds):
            for err, where in _check_model(head, activation, seed, sign_flip):
                if err > combo.max_error:
                    combo.max_error, combo.worst = err, where
        report.combos.append(combo)
        logger.debug("Gradient combo checked", extra={"head": head, "activation": activation, "max_error": combo.max_error})
    return report


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str


def _random_instance(rng: np.random.Generator, density: float | None = None) -> tuple[TaskGraph, np.ndarray]:
    K = int(rng.integers(2, 9))
    p = int(rng.integers(1, 33))
    d = float(rng.uniform(0.3, 1.0)) if density is None else density
    graph = random_task_graph(K, d, int(rng.integers(2**31)))
    return graph, rng.normal(size=(K, p))


def _state(graph: TaskGraph, W: np.ndarray, eta: float, lam: float) -> ServerState:
    return ServerState(
        graph=graph,
        strategy=AggregationStrategy("mira", eta=eta, lam=lam),
        deltas={k: W[k].copy() for k in range(graph.K)},
        train_sizes=np.ones(graph.K),
        sample_fraction=1.0,
        sampling_seed=0,
    )


def _laplacian_identity(rng) -> PropertyResult:
    worst = 0.0
    for _ in range(100):
        graph, W = _random_instance(rng)
        pairwise = regularization_value(graph, W)
        quadratic = float(np.sum(W * apply_extended_laplacian(graph, W)))
        scale = max(abs(pairwise), abs(quadratic))
        worst = max(worst, abs(pairwise - quadratic) / scale if scale else 0.0)
    return PropertyResult("laplacian identity", worst < 1e-10, f"max relative diff {worst:.3e}")


def _constant_annihilation(rng) -> PropertyResult:
    worst = 0.0
    for _ in range(100):
        graph, W = _random_instance(rng)
        constant = np.tile(W[0], (graph.K, 1))
        worst = max(worst, float(np.abs(apply_extended_laplacian(graph, constant)).max()))
    return PropertyResult("constant stack annihilated", worst < 1e-12, f"max abs {worst:.3e}")


def _server_update_kronecker(rng) -> PropertyResult:
    worst = 0.0
    for _ in range(50):
        graph, W = _random_instance(rng, density=1.0)
        step = float(rng.uniform(0.0, 1.0)) * safe_step_bound(graph)
        st = _state(graph, W, eta=1.0, lam=step)
        out = mira_aggregate(st, {k: W[k].copy() for k in range(graph.K)})
        p = W.shape[1]
        dense = (np.eye(graph.K * p) - step * np.kron(laplacian(graph), np.eye(p))) @ W.ravel()
        got = np.concatenate([out[k] for k in range(graph.K)])
        worst = max(worst, float(np.abs(got - dense).max()))
    return PropertyResult("server update matches Kronecker form", worst < 1e-12, f"max abs diff {worst:.3e}")


def _lambda_zero(rng) -> PropertyResult:
    for _ in range(20):
        graph, W = _random_instance(rng)
        st = _state(graph, W, eta=1.0, lam=0.0)
        sampled = [k for k in range(graph.K) if rng.random() < 0.5] or [0]
        fresh = {k: rng.normal(size=W.shape[1]) for k in sampled}
        out = mira_aggregate(st, fresh)
        for k in range(graph.K):
            expected = fresh[k] if k in fresh else W[k]
            if out[k].tobytes() != expected.tobytes():
                return PropertyResult("lambda=0 is a no-op", False, f"client {k} changed")
    return PropertyResult("lambda=0 is a no-op", True, "bitwise equal")


def _complete_graph_average(rng) -> PropertyResult:
    worst = 0.0
    for K in range(2, 9):
        graph = new_task_graph(np.ones((K, K)) - np.eye(K))
        W = rng.normal(size=(K, int(rng.integers(1, 33))))
        st = _state(graph, W, eta=1.0, lam=1.0 / K)
        out = mira_aggregate(st, {k: W[k].copy() for k in range(K)})
        mean = W.mean(axis=0)
        worst = max(worst, max(float(np.abs(out[k] - mean).max()) for k in range(K)))
    return PropertyResult("complete graph averages", worst < 1e-12, f"max abs diff {worst:.3e}")


def _carry_forward() -> PropertyResult:
    cfg = ExperimentConfig(
        num_clients=10,
        rounds=10,
        local_steps=2,
        sample_fraction=0.3,
        clusters=2,
        dim=4,
        output_dim=2,
        rank=2,
        n_train=16,
        n_test=16,
        strategies=("mira",),
    ).resolved()
    clients, server = build_strategy(cfg, "mira", prepare(cfg))
    previous = {k: v.copy() for k, v in server.deltas.items()}
    violations = []

    def hook(report):
        for k in range(cfg.num_clients):
            if k not in report.sampled and server.deltas[k].tobytes() != previous[k].tobytes():
                violations.append((report.round, k))
            previous[k] = server.deltas[k].copy()

    run(cfg.rounds, clients, server, [hook], local_steps=cfg.local_steps)
    detail = "non-sampled deltas unchanged" if not violations else f"round/client {violations[0]} changed"
    return PropertyResult("carry-forward of non-sampled clients", not violations, detail)


def _contraction(rng, eta_lambda: float | None) -> PropertyResult:
    worst, failures = 0.0, 0
    for trial in range(100):
        graph, W = _random_instance(rng, density=1.0)
        step = safe_step_bound(graph) if eta_lambda is None else eta_lambda
        stacks = [W]
        if eta_lambda is not None:
            # the top Laplacian eigenvector is where an oversized step shows first
            _, vectors = np.linalg.eigh(laplacian(graph))
            stacks.append(np.outer(vectors[:, -1], np.ones(W.shape[1])))
        for stack in stacks:
            st = _state(graph, stack, eta=1.0, lam=step)
            out = mira_aggregate(st, {k: stack[k].copy() for k in range(graph.K)})
            before = regularization_value(graph, stack)
            after = regularization_value(graph, [out[k] for k in range(graph.K)])
            growth = after - before
            worst = max(worst, growth)
            failures += growth > 1e-10
    detail = f"max growth {worst:.3e}" + (f", {failures} violation(s)" if failures else "")
    return PropertyResult("regularizer contraction", failures == 0, detail)


def oracle_check(seed: int = 0, eta_lambda: float | None = None) -> list[PropertyResult]:
    """Aggregation and Laplacian property suite; eta_lambda forces the contraction step size."""
    rng = np.random.default_rng(seed)
    results = [
        _laplacian_identity(rng),
        _constant_annihilation(rng),
        _server_update_kronecker(rng),
        _lambda_zero(rng),
        _complete_graph_average(rng),
        _carry_forward(),
        _contraction(rng, eta_lambda),
    ]
    for r in results:
        logger.debug("Property checked", extra={"property": r.name, "passed": r.passed, "detail": r.detail})
    return results
