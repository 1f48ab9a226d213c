"""Task-similarity graph and the Laplacian algebra used by the server."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from aws_lambda_powertools import Logger
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform

from taskfed.exceptions import (
    AsymmetricWeights,
    DimensionMismatch,
    GraphFileError,
    NegativeWeight,
    NonFiniteWeight,
    NonzeroDiagonal,
    TooFewClients,
    ZeroDegreeGraph,
)

logger = Logger(service="taskfed", child=True)


@dataclass(frozen=True, eq=False)
class TaskGraph:
    """Symmetric, non-negative client similarity graph without self-loops.

    Build it through new_task_graph so the invariants are checked; the weight
    matrix is stored read-only.
    """

    weights: np.ndarray

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @cached_property
    def degrees(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @cached_property
    def components(self) -> int:
        n, _ = connected_components(self.weights > 0, directed=False)
        return int(n)

    def neighbors(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.weights[k] > 0)


def _first(mask: np.ndarray) -> tuple[int, int]:
    i, j = np.argwhere(mask)[0]
    return int(i), int(j)


def new_task_graph(weights) -> TaskGraph:
    w = np.array(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise DimensionMismatch(f"weights must be a square matrix, got shape {w.shape}")
    K = w.shape[0]
    if K < 2:
        raise TooFewClients(f"a task graph needs at least 2 clients, got {K}")
    if not np.all(np.isfinite(w)):
        idx = _first(~np.isfinite(w))
        raise NonFiniteWeight(f"non-finite weight at {idx}", index=idx)
    diag = np.flatnonzero(np.diag(w) != 0)
    if diag.size:
        k = int(diag[0])
        raise NonzeroDiagonal(f"self-loop weight {w[k, k]} at ({k},{k})", index=(k, k))
    if np.any(w < 0):
        idx = _first(w < 0)
        raise NegativeWeight(f"negative weight {w[idx]} at {idx}", index=idx)
    # report the lower-triangle entry of an asymmetric pair
    asym = np.tril(w != w.T)
    if asym.any():
        idx = _first(asym)
        raise AsymmetricWeights(
            f"weights[{idx[0]},{idx[1]}]={w[idx]} differs from weights[{idx[1]},{idx[0]}]={w[idx[::-1]]}",
            index=idx,
        )
    w.setflags(write=False)
    graph = TaskGraph(weights=w)
    if graph.components > 1:
        logger.warning(
            "Task graph is disconnected; isolated groups receive no cross-group pull",
            extra={"components": graph.components, "clients": K},
        )
    return graph


def random_task_graph(K: int, density: float, seed: int) -> TaskGraph:
    """Bernoulli(density) edge mask with Uniform(0,1) weights, symmetrized."""
    if K < 2:
        raise TooFewClients(f"a task graph needs at least 2 clients, got {K}")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    rng = np.random.default_rng(seed)
    rows, cols = np.triu_indices(K, k=1)
    keep = rng.random(rows.size) < density
    values = rng.uniform(np.nextafter(0.0, 1.0), 1.0, size=rows.size)
    w = np.zeros((K, K))
    w[rows[keep], cols[keep]] = values[keep]
    w = w + w.T
    return new_task_graph(w)


def laplacian(g: TaskGraph) -> np.ndarray:
    """L = D - M."""
    return np.diag(g.degrees) - g.weights


def _stack(g: TaskGraph, stacked: Sequence[np.ndarray]) -> np.ndarray:
    if len(stacked) != g.K:
        raise DimensionMismatch(f"expected {g.K} client vectors, got {len(stacked)}")
    lengths = {np.shape(v) for v in stacked}
    if len(lengths) != 1 or len(next(iter(lengths))) != 1:
        raise DimensionMismatch(f"client vectors must be 1-D and of equal length, got shapes {sorted(lengths)}")
    return np.asarray(stacked, dtype=np.float64)


def apply_extended_laplacian(g: TaskGraph, stacked: Sequence[np.ndarray]) -> np.ndarray:
    """Apply (L ⊗ I_p) blockwise; row k of the result is block k.

    Equivalent to δ_k·v_k - Σ a_kℓ·v_ℓ without materializing the pK×pK matrix.
    """
    W = _stack(g, stacked)
    return g.degrees[:, None] * W - g.weights @ W


def regularization_value(g: TaskGraph, stacked: Sequence[np.ndarray]) -> float:
    """½ Σ_k Σ_ℓ a_kℓ ‖w_k - w_ℓ‖², each unordered pair counted from both sides."""
    W = _stack(g, stacked)
    distances = squareform(pdist(W, metric="sqeuclidean"))
    return float(0.5 * np.sum(g.weights * distances))


def safe_step_bound(g: TaskGraph) -> float:
    """Gershgorin bound 1/(2·max δ) ≤ 1/λ_max(L) for the server step ηλ."""
    max_degree = float(g.degrees.max())
    if max_degree <= 0.0:
        raise ZeroDegreeGraph("every weight is zero, no step bound exists")
    return 1.0 / (2.0 * max_degree)


def validation_report(g: TaskGraph) -> list[tuple[str, bool, str]]:
    w = g.weights
    L = laplacian(g)
    row_sums = np.abs(L.sum(axis=1)).max()
    tol = 1e-10 * max(1.0, float(g.degrees.max()))
    return [
        ("symmetric", bool(np.array_equal(w, w.T)), ""),
        ("non-negative", bool(np.all(w >= 0)), f"min weight {w.min():.17g}"),
        ("zero diagonal", bool(np.all(np.diag(w) == 0)), ""),
        ("laplacian row sums", bool(row_sums < tol), f"max |row sum| {row_sums:.3e}"),
        ("connected", g.components == 1, f"{g.components} component(s)"),
    ]


def load_graph(path: str | Path) -> TaskGraph:
    """Read a plain-text matrix file: first line K, then K whitespace-separated rows."""
    path = Path(path)
    try:
        lines = [line for line in path.read_text().splitlines() if line.strip()]
        K = int(lines[0].strip())
        w = np.loadtxt(lines[1:], dtype=np.float64, ndmin=2)
    except (OSError, IndexError, ValueError) as exc:
        raise GraphFileError(f"cannot read graph file {path}: {exc}") from exc
    if w.shape != (K, K):
        raise GraphFileError(f"{path}: header says K={K} but matrix has shape {w.shape}")
    return new_task_graph(w)


def save_graph(g: TaskGraph, path: str | Path) -> None:
    np.savetxt(path, g.weights, fmt="%.17g", header=str(g.K), comments="")
