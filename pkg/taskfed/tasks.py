"""Synthetic heterogeneous multi-task data.

Clients are assigned round-robin to task clusters. Each cluster has a center
drawn from N(0, inter_spread²·I) and each client's ground truth is its center
plus N(0, intra_spread²·I), so truth-derived similarity carries real signal.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from aws_lambda_powertools import Logger
from scipy.spatial.distance import pdist, squareform

from taskfed.exceptions import InvalidConfig
from taskfed.graph import TaskGraph, new_task_graph

logger = Logger(service="taskfed", child=True)

TaskFamily = Literal["regression", "classification"]


@dataclass(frozen=True, eq=False)
class TaskUniverse:
    clusters: int
    assignment: np.ndarray
    centers: np.ndarray
    truths: np.ndarray
    dim: int
    output_dim: int
    family: TaskFamily
    intra_spread: float
    inter_spread: float
    noise_std: float
    n_train: np.ndarray
    n_test: int

    @property
    def K(self) -> int:
        return self.truths.shape[0]

    def truth_map(self, k: int) -> np.ndarray:
        """Client k's ground truth as an output_dim×dim map."""
        return self.truths[k].reshape(self.output_dim, self.dim)


@dataclass(frozen=True, eq=False)
class ClientDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]


def _validate(K, C, dim, intra_spread, inter_spread, noise_std, n_train, n_test, output_dim, family, size_skew):
    problems = []
    if not K >= C >= 1:
        problems.append(f"need K >= clusters >= 1, got K={K}, clusters={C}")
    if dim < 1 or output_dim < 1:
        problems.append(f"dim and output_dim must be positive, got {dim}, {output_dim}")
    if min(intra_spread, inter_spread, noise_std, size_skew) < 0:
        problems.append("spreads, noise_std and size_skew must be non-negative")
    if C > 1 and not inter_spread > intra_spread:
        problems.append(f"inter_spread ({inter_spread}) must exceed intra_spread ({intra_spread})")
    if n_train < 1 or n_test < 1:
        problems.append(f"sample counts must be at least 1, got n_train={n_train}, n_test={n_test}")
    if family not in ("regression", "classification"):
        problems.append(f"unknown task family {family!r}")
    if family == "classification" and output_dim < 2:
        problems.append("classification needs output_dim (classes) >= 2")
    if problems:
        raise InvalidConfig("; ".join(problems))


def _sample(rng: np.random.Generator, truth: np.ndarray, n: int, family: str, noise_std: float):
    X = rng.normal(size=(n, truth.shape[1]))
    logits = X @ truth.T
    if family == "regression":
        return X, logits + rng.normal(0.0, noise_std, size=logits.shape)
    # Gumbel-max draws labels from softmax(θx)
    labels = np.argmax(logits + rng.gumbel(size=logits.shape), axis=1)
    return X, labels.astype(np.float64)


def generate_universe(
    K: int,
    C: int,
    dim: int,
    intra_spread: float,
    inter_spread: float,
    noise_std: float,
    n_train: int,
    n_test: int,
    seed: int,
    *,
    output_dim: int = 1,
    family: TaskFamily = "regression",
    size_skew: float = 0.0,
) -> tuple[TaskUniverse, list[ClientDataset]]:
    _validate(K, C, dim, intra_spread, inter_spread, noise_std, n_train, n_test, output_dim, family, size_skew)
    rng = np.random.default_rng(seed)
    p = output_dim * dim
    assignment = np.arange(K) % C
    centers = rng.normal(0.0, inter_spread, size=(C, p))
    truths = centers[assignment] + rng.normal(0.0, intra_spread, size=(K, p))
    if size_skew > 0:
        factors = np.exp(rng.normal(-0.5 * size_skew**2, size_skew, size=K))
        sizes = np.maximum(1, np.rint(n_train * factors)).astype(np.int64)
    else:
        sizes = np.full(K, n_train, dtype=np.int64)

    datasets = []
    for k in range(K):
        truth = truths[k].reshape(output_dim, dim)
        X_tr, y_tr = _sample(rng, truth, int(sizes[k]), family, noise_std)
        X_te, y_te = _sample(rng, truth, n_test, family, noise_std)
        datasets.append(ClientDataset(X_tr, y_tr, X_te, y_te))

    universe = TaskUniverse(
        clusters=C,
        assignment=assignment,
        centers=centers,
        truths=truths,
        dim=dim,
        output_dim=output_dim,
        family=family,
        intra_spread=intra_spread,
        inter_spread=inter_spread,
        noise_std=noise_std,
        n_train=sizes,
        n_test=n_test,
    )
    logger.debug(
        "Generated task universe",
        extra={"clients": K, "clusters": C, "family": family, "train_sizes": sizes.tolist()},
    )
    return universe, datasets


def default_similarity_scale(u: TaskUniverse) -> float:
    """4·intra_spread²·p, twice the expected within-cluster squared distance."""
    scale = 4.0 * u.intra_spread**2 * u.truths.shape[1]
    return scale if scale > 0 else 1.0


def similarity_from_truth(u: TaskUniverse, scale: float | None = None) -> TaskGraph:
    """a_kℓ = exp(-‖θ_k - θ_ℓ‖² / scale) with a zero diagonal."""
    if scale is None:
        scale = default_similarity_scale(u)
    if scale <= 0:
        raise InvalidConfig(f"similarity scale must be positive, got {scale}")
    weights = np.exp(-squareform(pdist(u.truths, metric="sqeuclidean")) / scale)
    np.fill_diagonal(weights, 0.0)
    return new_task_graph(weights)


def _frame(X: np.ndarray, y: np.ndarray) -> pd.DataFrame:
    Y = y.reshape(len(y), -1)
    columns = {f"x{j}": X[:, j] for j in range(X.shape[1])}
    columns.update({f"y{j}": Y[:, j] for j in range(Y.shape[1])})
    return pd.DataFrame(columns)


def export_datasets(datasets: list[ClientDataset], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k, data in enumerate(datasets):
        for split, X, y in (("train", data.X_train, data.y_train), ("test", data.X_test, data.y_test)):
            path = out_dir / f"client_{k}_{split}.csv"
            _frame(X, y).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
            written.append(path)
    return written
