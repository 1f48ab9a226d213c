"""Experiment configuration.

Config files are INI-style: a handful of sections holding flat ``key = value``
lines. Every key lives in exactly one section. Environment variables named
``TASKFED_<KEY>`` override file values. Seeds left unset are derived from
``master_seed`` when the config is resolved.
"""

from __future__ import annotations

import configparser
import os
from pathlib import Path
from typing import Any, Literal, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from taskfed.exceptions import ConfigError, TaskFedError
from taskfed.model import ModelSpec
from taskfed.server import NeighborMode, StrategyKind

ENV_PREFIX = "TASKFED_"

SECTIONS: dict[str, tuple[str, ...]] = {
    "federation": (
        "num_clients",
        "rounds",
        "local_steps",
        "sample_fraction",
        "strategies",
        "neighbor_mode",
        "parallel_clients",
    ),
    "aggregation": ("eta", "lambda"),
    "training": ("local_lr", "batch_size", "init_scale"),
    "model": ("rank", "hidden_dims", "activation", "lora_scale"),
    "tasks": (
        "task_family",
        "clusters",
        "dim",
        "output_dim",
        "intra_spread",
        "inter_spread",
        "noise_std",
        "n_train",
        "n_test",
        "size_skew",
    ),
    "graph": ("graph_mode", "graph_density", "similarity_scale"),
    "seeds": (
        "master_seed",
        "base_seed",
        "adapter_seed",
        "data_seed",
        "sampling_seed",
        "client_seed",
        "graph_seed",
    ),
    "output": ("output_dir", "report_clients", "export_datasets", "write_checkpoints"),
}

DERIVED_SEEDS = ("base_seed", "adapter_seed", "data_seed", "sampling_seed", "client_seed", "graph_seed")
OPTIONAL_KEYS = (*DERIVED_SEEDS, "similarity_scale")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    # federation
    num_clients: int = Field(20, ge=2)
    rounds: int = Field(60, ge=1)
    local_steps: int = Field(5, ge=1)
    sample_fraction: float = Field(0.1, gt=0.0, le=1.0)
    strategies: tuple[StrategyKind, ...] = ("mira", "fedavg", "local_only")
    neighbor_mode: NeighborMode = "all_stale"
    parallel_clients: bool = False

    # aggregation
    eta: float = Field(1.0, gt=0.0)
    lam: float = Field(0.1, ge=0.0, alias="lambda")

    # training
    local_lr: float = Field(0.01, ge=0.0)
    batch_size: int = Field(8, ge=1)
    init_scale: float = Field(0.02, gt=0.0)

    # model
    rank: int = Field(16, ge=1)
    hidden_dims: tuple[int, ...] = ()
    activation: Literal["tanh", "relu"] = "tanh"
    lora_scale: float = Field(1.0, gt=0.0)

    # tasks
    task_family: Literal["regression", "classification"] = "regression"
    clusters: int = Field(4, ge=1)
    dim: int = Field(32, ge=1)
    output_dim: int = Field(16, ge=1)
    intra_spread: float = Field(0.1, ge=0.0)
    inter_spread: float = Field(1.0, ge=0.0)
    noise_std: float = Field(0.1, ge=0.0)
    n_train: int = Field(64, ge=1)
    n_test: int = Field(200, ge=1)
    size_skew: float = Field(0.0, ge=0.0)

    # graph
    graph_mode: Literal["truth", "random"] = "truth"
    graph_density: float = Field(0.5, gt=0.0, le=1.0)
    similarity_scale: float | None = Field(None, gt=0.0)

    # seeds
    master_seed: int = Field(0, ge=0)
    base_seed: int | None = Field(None, ge=0)
    adapter_seed: int | None = Field(None, ge=0)
    data_seed: int | None = Field(None, ge=0)
    sampling_seed: int | None = Field(None, ge=0)
    client_seed: int | None = Field(None, ge=0)
    graph_seed: int | None = Field(None, ge=0)

    # output
    output_dir: str = "runs/default"
    report_clients: int = Field(4, ge=0)
    export_datasets: bool = False
    write_checkpoints: bool = False

    @field_validator("strategies", mode="before")
    @classmethod
    def _split_strategies(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        if not value:
            raise ValueError("at least one strategy is required")
        return tuple(dict.fromkeys(value))

    @field_validator("hidden_dims", mode="before")
    @classmethod
    def _split_dims(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(part.strip() for part in value.split(",") if part.strip())
        return value

    @field_validator(*OPTIONAL_KEYS, mode="before")
    @classmethod
    def _blank_is_unset(cls, value: Any) -> Any:
        if isinstance(value, str) and value.strip().lower() in ("", "auto", "none"):
            return None
        return value

    @model_validator(mode="after")
    def _cross_field(self) -> "ExperimentConfig":
        problems = []
        if self.clusters > self.num_clients:
            problems.append(f"clusters ({self.clusters}) exceeds num_clients ({self.num_clients})")
        if self.clusters > 1 and not self.inter_spread > self.intra_spread:
            problems.append("inter_spread must exceed intra_spread when there is more than one cluster")
        if self.task_family == "classification" and self.output_dim < 2:
            problems.append("classification needs output_dim >= 2 classes")
        if self.report_clients > self.num_clients:
            problems.append("report_clients exceeds num_clients")
        if any(d < 1 for d in self.hidden_dims):
            problems.append("hidden_dims must be positive")
        elif self.rank > self.max_rank:
            problems.append(f"rank {self.rank} exceeds {self.max_rank}, the smallest layer dimension")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.dim, *self.hidden_dims, self.output_dim)

    @property
    def max_rank(self) -> int:
        dims = self.layer_dims
        return min(min(v, d) for v, d in zip(dims[:-1], dims[1:]))

    @property
    def head(self) -> str:
        return "mse" if self.task_family == "regression" else "softmax_xent"

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            layer_dims=self.layer_dims,
            rank=self.rank,
            activation=self.activation,
            head=self.head,
            lora_scale=self.lora_scale,
        )

    def resolved(self) -> "ExperimentConfig":
        """Copy with every derived seed filled in from master_seed."""
        state = np.random.SeedSequence(self.master_seed).generate_state(len(DERIVED_SEEDS))
        update = {
            name: int(value)
            for name, value in zip(DERIVED_SEEDS, state)
            if getattr(self, name) is None
        }
        return self.model_copy(update=update)


def _known_keys() -> dict[str, str]:
    keys = {}
    for name, info in ExperimentConfig.model_fields.items():
        keys[name] = name
        if info.alias:
            keys[info.alias] = name
    return keys


def _read_file(path: Path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}", [str(exc)]) from exc

    raw: dict[str, str] = {}
    problems = []
    for section in parser.sections():
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")
            continue
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                home = next((s for s, keys in SECTIONS.items() if key in keys), None)
                problems.append(f"[{section}] {key}: " + (f"belongs in [{home}]" if home else "unknown key"))
                continue
            raw[key] = value
    if problems:
        raise ConfigError(f"invalid config {path}", problems)
    return raw


def _env_overrides(environ: Mapping[str, str]) -> dict[str, str]:
    known = _known_keys()
    overrides, unknown = {}, []
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in known:
            unknown.append(name)
            continue
        overrides[key] = value
    if unknown:
        raise ConfigError("unknown configuration environment variables", [f"{n}: not a config key" for n in sorted(unknown)])
    return overrides


def _merge(raw: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Apply overrides, letting a key's alias and field name replace each other."""
    known = _known_keys()
    merged = dict(raw)
    for key, value in overrides.items():
        field = known.get(key, key)
        for existing in [k for k in merged if known.get(k, k) == field]:
            del merged[existing]
        merged[key] = value
    return merged


def build_config(values: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(dict(values))
    except ValidationError as exc:
        diagnostics = [f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors()]
        raise ConfigError("configuration is invalid", diagnostics) from exc
    except TaskFedError as exc:
        raise ConfigError("configuration is invalid", [str(exc)]) from exc


def load_config(
    path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Read a config file (optional), then environment, then explicit overrides."""
    raw = _read_file(Path(path)) if path is not None else {}
    raw = _merge(raw, _env_overrides(os.environ if environ is None else environ))
    raw = _merge(raw, overrides or {})
    return build_config(raw)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return str(value)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    values = cfg.model_dump(by_alias=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in SECTIONS.items():
        parser[section] = {key: _format(values[key]) for key in keys}
    with open(path, "w") as fh:
        parser.write(fh)
