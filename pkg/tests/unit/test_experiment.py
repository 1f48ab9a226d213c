import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from taskfed.config import ExperimentConfig, load_config
from taskfed.experiment import prepare, run_experiment, run_strategy, selected_clients, sweep
from taskfed.model import build_model, load_checkpoint, trainable_vector

CONFIGS = Path(__file__).resolve().parents[2] / "configs"


@pytest.fixture
def cfg(tmp_path):
    return ExperimentConfig(
        num_clients=6,
        rounds=3,
        local_steps=2,
        sample_fraction=0.5,
        clusters=2,
        dim=4,
        output_dim=2,
        rank=2,
        n_train=12,
        n_test=10,
        local_lr=0.05,
        report_clients=2,
        output_dir=str(tmp_path / "run"),
    )


def test_run_writes_reports(cfg, tmp_path):
    summary = run_experiment(cfg)
    out = tmp_path / "run"
    for kind in ("mira", "fedavg", "local_only"):
        rounds = pd.read_csv(out / kind / "rounds.csv")
        assert rounds["t"].tolist() == [1, 2, 3]
        clients = pd.read_csv(out / kind / "clients.csv")
        assert len(clients) == 3 * 6
    assert (out / "graph.txt").read_text().splitlines()[0] == "6"
    assert json.loads((out / "summary.json").read_text()) == json.loads(json.dumps(summary))
    assert load_config(out / "effective_config.ini", environ={}).data_seed == cfg.resolved().data_seed


def test_summary_contents(cfg):
    summary = run_experiment(cfg)
    assert set(summary["strategies"]) == {"mira", "fedavg", "local_only"}
    assert summary["strategies"]["local_only"]["cum_up_bytes"] == 0
    assert summary["strategies"]["mira"]["cum_up_bytes"] == summary["strategies"]["fedavg"]["cum_up_bytes"] > 0
    memory = summary["strategies"]["mira"]["memory"]
    assert memory["total"] == memory["C_w"] + memory["C_delta"] + memory["O"]
    assert len(summary["per_client"]) == 6
    assert set(summary["per_cluster"]) == {"0", "1"}
    assert [row["client"] for row in summary["selected_clients"]] == selected_clients(cfg.resolved())
    comparison = summary["comparisons"]["mira_vs_fedavg"]
    assert 0.0 <= comparison["client_win_fraction"] <= 1.0
    assert summary["graph"]["clients"] == 6


def test_strategies_share_data_and_graph(cfg):
    a = prepare(cfg.resolved())
    b = prepare(cfg.resolved())
    np.testing.assert_array_equal(a.graph.weights, b.graph.weights)
    np.testing.assert_array_equal(a.datasets[3].X_train, b.datasets[3].X_train)


def test_reruns_are_byte_identical(cfg, tmp_path):
    run_experiment(cfg, tmp_path / "first")
    run_experiment(cfg.model_copy(update={"parallel_clients": True}), tmp_path / "second")
    for name in ("mira/rounds.csv", "mira/clients.csv", "fedavg/rounds.csv", "local_only/clients.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_random_graph_mode(cfg):
    summary = run_experiment(cfg.model_copy(update={"graph_mode": "random", "graph_density": 1.0}))
    assert summary["graph"]["mode"] == "random"
    assert summary["graph"]["components"] == 1


def test_dataset_export_and_checkpoints(cfg, tmp_path):
    run_experiment(cfg.model_copy(update={"export_datasets": True, "write_checkpoints": True, "strategies": ("mira",)}))
    out = tmp_path / "run"
    assert (out / "data" / "client_5_test.csv").exists()
    resolved = cfg.resolved()
    model = build_model(resolved.model_spec(), resolved.base_seed, resolved.adapter_seed)
    load_checkpoint(model, out / "mira" / "checkpoints" / "client_0.ckpt")
    assert trainable_vector(model).size == model.trainable_count
    assert not (out / "fedavg").exists()


def test_classification_family(cfg):
    summary = run_experiment(
        cfg.model_copy(update={"task_family": "classification", "output_dim": 3, "strategies": ("mira", "fedavg")})
    )
    assert summary["strategies"]["mira"]["final_mean_test"] > 0


def test_sweep_counts_wins(cfg, tmp_path):
    result = sweep(cfg.model_copy(update={"rounds": 2}), seeds=2, output_dir=tmp_path / "sweep")
    assert result["seeds"] == 2
    assert [row["master_seed"] for row in result["per_seed"]] == [0, 1]
    assert 0 <= result["mira_beats_fedavg"] <= 2
    assert json.loads((tmp_path / "sweep" / "sweep.json").read_text())["seeds"] == 2


def test_summary_agrees_with_round_csv(cfg, tmp_path):
    summary = run_experiment(cfg)
    rounds = pd.read_csv(tmp_path / "run" / "mira" / "rounds.csv", float_precision="round_trip")
    assert rounds["J"].iloc[-1] == summary["strategies"]["mira"]["final_J"]
    assert rounds["up_bytes"].iloc[-1] == summary["strategies"]["mira"]["cum_up_bytes"]


def test_mira_and_fedavg_report_equal_costs(cfg):
    summary = run_experiment(cfg)
    mira, fedavg = summary["strategies"]["mira"], summary["strategies"]["fedavg"]
    assert mira["memory"] == fedavg["memory"]
    assert mira["round_up_bytes_per_client"] == fedavg["round_up_bytes_per_client"] > 0
    assert summary["strategies"]["local_only"]["round_up_bytes_per_client"] == 0


def test_bases_stay_frozen_through_a_run(cfg):
    resolved = cfg.resolved()
    setup = prepare(resolved)
    result = run_strategy(resolved, "mira", setup)
    reference = build_model(resolved.model_spec(), resolved.base_seed, resolved.adapter_seed)
    for client in result.clients:
        for layer, ref in zip(client.model.layers, reference.layers):
            assert layer.base.tobytes() == ref.base.tobytes()


@pytest.mark.slow
def test_desk_scale_sweep_favours_mira(tmp_path):
    cfg = load_config(CONFIGS / "desk_scale.ini", environ={}, overrides={"output_dir": str(tmp_path)})
    result = sweep(cfg, seeds=10)
    assert result["mira_beats_fedavg"] >= 8
    assert result["mira_beats_local_only"] >= 7
    assert result["mira_wins_half_clients_vs_fedavg"] >= 5
