"""End-to-end experiment execution and multi-seed sweeps."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from aws_lambda_powertools import Logger

from taskfed.client import ClientState, build_clients
from taskfed.config import ExperimentConfig, dump_config
from taskfed.exceptions import ZeroDegreeGraph
from taskfed.graph import TaskGraph, random_task_graph, safe_step_bound, save_graph
from taskfed.metrics import (
    RoundReport,
    build_cost_model,
    round_comm_cost,
    write_client_csv,
    write_round_csv,
)
from taskfed.model import save_checkpoint, trainable_vector
from taskfed.server import AggregationStrategy, RoundHook, ServerState, run
from taskfed.tasks import ClientDataset, TaskUniverse, export_datasets, generate_universe, similarity_from_truth

logger = Logger(service="taskfed", child=True)


@dataclass(frozen=True, eq=False)
class Setup:
    universe: TaskUniverse
    datasets: list[ClientDataset]
    graph: TaskGraph


@dataclass(frozen=True, eq=False)
class StrategyResult:
    kind: str
    reports: list[RoundReport]
    clients: list[ClientState]
    server: ServerState

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]


def prepare(cfg: ExperimentConfig) -> Setup:
    """Data and graph shared by every strategy of one experiment."""
    universe, datasets = generate_universe(
        cfg.num_clients,
        cfg.clusters,
        cfg.dim,
        cfg.intra_spread,
        cfg.inter_spread,
        cfg.noise_std,
        cfg.n_train,
        cfg.n_test,
        cfg.data_seed,
        output_dim=cfg.output_dim,
        family=cfg.task_family,
        size_skew=cfg.size_skew,
    )
    if cfg.graph_mode == "truth":
        graph = similarity_from_truth(universe, cfg.similarity_scale)
    else:
        graph = random_task_graph(cfg.num_clients, cfg.graph_density, cfg.graph_seed)
    return Setup(universe, datasets, graph)


def build_strategy(cfg: ExperimentConfig, kind: str, setup: Setup) -> tuple[list[ClientState], ServerState]:
    """Fresh clients and server state for one strategy."""
    clients = build_clients(
        cfg.model_spec(),
        setup.datasets,
        base_seed=cfg.base_seed,
        adapter_seed=cfg.adapter_seed,
        client_seed=cfg.client_seed,
        local_lr=cfg.local_lr,
        batch_size=cfg.batch_size,
        init_scale=cfg.init_scale,
    )
    server = ServerState.initial(
        setup.graph,
        AggregationStrategy(kind, eta=cfg.eta, lam=cfg.lam),
        trainable_vector(clients[0].model),
        [d.n_train for d in setup.datasets],
        cfg.sample_fraction,
        cfg.sampling_seed,
        cfg.neighbor_mode,
    )
    return clients, server


def run_strategy(
    cfg: ExperimentConfig, kind: str, setup: Setup, hooks: Sequence[RoundHook] = ()
) -> StrategyResult:
    clients, server = build_strategy(cfg, kind, setup)
    logger.info("Starting strategy", extra={"strategy": kind, "rounds": cfg.rounds, "clients": cfg.num_clients})
    reports = run(
        cfg.rounds,
        clients,
        server,
        hooks,
        local_steps=cfg.local_steps,
        parallel_clients=cfg.parallel_clients,
    )
    return StrategyResult(kind, reports, clients, server)


def selected_clients(cfg: ExperimentConfig) -> list[int]:
    """Clients tabulated individually in the summary, drawn from the data seed."""
    rng = np.random.default_rng([cfg.data_seed, 1])
    return sorted(int(k) for k in rng.choice(cfg.num_clients, size=cfg.report_clients, replace=False))


def _win_fraction(a: RoundReport, b: RoundReport) -> float:
    wins = [x.test_loss < y.test_loss for x, y in zip(a.per_client, b.per_client)]
    return float(np.mean(wins))


def build_summary(cfg: ExperimentConfig, setup: Setup, results: dict[str, StrategyResult]) -> dict:
    assignment = setup.universe.assignment
    strategies = {}
    for kind, res in results.items():
        model = res.clients[0].model
        cost = build_cost_model(model)
        up, down = round_comm_cost(model, 1, kind)
        strategies[kind] = {
            "final_J": res.final.J,
            "final_F": res.final.F,
            "final_R_value": res.final.R_value,
            "final_mean_train": res.final.mean_train,
            "final_mean_test": res.final.mean_test,
            "cum_up_bytes": res.final.cum_up_bytes,
            "cum_down_bytes": res.final.cum_down_bytes,
            "round_up_bytes_per_client": up,
            "round_down_bytes_per_client": down,
            "memory": {"C_w": cost.C_w, "C_delta": cost.C_delta, "O": cost.O, "total": cost.memory_total},
        }

    per_client = [
        {
            "client": k,
            "cluster": int(assignment[k]),
            **{kind: res.final.per_client[k].test_loss for kind, res in results.items()},
        }
        for k in range(cfg.num_clients)
    ]
    per_cluster = {
        str(c): {
            kind: float(np.mean([res.final.per_client[k].test_loss for k in np.flatnonzero(assignment == c)]))
            for kind, res in results.items()
        }
        for c in range(setup.universe.clusters)
    }
    chosen = selected_clients(cfg)
    comparisons = {}
    if "mira" in results:
        for baseline in ("fedavg", "local_only"):
            if baseline in results:
                comparisons[f"mira_vs_{baseline}"] = {
                    "mean_test_lower": results["mira"].final.mean_test < results[baseline].final.mean_test,
                    "client_win_fraction": _win_fraction(results["mira"].final, results[baseline].final),
                }
    try:
        bound = safe_step_bound(setup.graph)
    except ZeroDegreeGraph:
        bound = None
    return {
        "strategies": strategies,
        "per_client": per_client,
        "per_cluster": per_cluster,
        "selected_clients": [row for row in per_client if row["client"] in chosen],
        "comparisons": comparisons,
        "graph": {
            "mode": cfg.graph_mode,
            "clients": setup.graph.K,
            "components": setup.graph.components,
            "safe_step_bound": bound,
            "eta_lambda": cfg.eta * cfg.lam,
        },
    }


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> dict:
    """Run every configured strategy on identical data, graph and seeds; write reports."""
    cfg = cfg.resolved()
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "effective_config.ini")

    setup = prepare(cfg)
    save_graph(setup.graph, out / "graph.txt")
    if cfg.export_datasets:
        export_datasets(setup.datasets, out / "data")

    results = {}
    for kind in cfg.strategies:
        res = run_strategy(cfg, kind, setup)
        results[kind] = res
        strategy_dir = out / kind
        strategy_dir.mkdir(exist_ok=True)
        write_round_csv(res.reports, strategy_dir / "rounds.csv")
        write_client_csv(res.reports, strategy_dir / "clients.csv")
        if cfg.write_checkpoints:
            ckpt_dir = strategy_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            for client in res.clients:
                save_checkpoint(client.model, ckpt_dir / f"client_{client.id}.ckpt")
        logger.info(
            "Strategy finished",
            extra={"strategy": kind, "final_J": res.final.J, "final_mean_test": res.final.mean_test},
        )

    summary = build_summary(cfg, setup, results)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


SWEEP_STRATEGIES = ("mira", "fedavg", "local_only")


def sweep(cfg: ExperimentConfig, seeds: int, output_dir: str | Path | None = None) -> dict:
    """Repeat the experiment over consecutive master seeds and count MIRA's wins."""
    per_seed = []
    for master in range(cfg.master_seed, cfg.master_seed + seeds):
        seed_cfg = cfg.model_copy(update={"master_seed": master, "strategies": SWEEP_STRATEGIES}).resolved()
        setup = prepare(seed_cfg)
        finals = {kind: run_strategy(seed_cfg, kind, setup).final for kind in SWEEP_STRATEGIES}
        row = {
            "master_seed": master,
            **{f"{kind}_mean_test": finals[kind].mean_test for kind in SWEEP_STRATEGIES},
            "client_win_fraction_vs_fedavg": _win_fraction(finals["mira"], finals["fedavg"]),
        }
        per_seed.append(row)
        logger.info("Sweep seed finished", extra=row)

    result = {
        "seeds": seeds,
        "mira_beats_fedavg": sum(r["mira_mean_test"] < r["fedavg_mean_test"] for r in per_seed),
        "mira_beats_local_only": sum(r["mira_mean_test"] < r["local_only_mean_test"] for r in per_seed),
        "mira_wins_half_clients_vs_fedavg": sum(r["client_win_fraction_vs_fedavg"] >= 0.5 for r in per_seed),
        "per_seed": per_seed,
    }
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
