"""Small stack of LoRA-adapted linear layers with a loss head.

This is the per-client carrier of w_k: frozen bases shared by every client and a
trainable delta (the concatenated adapter factors) that travels to the server.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from scipy.special import log_softmax, softmax

from taskfed.exceptions import (
    DimensionMismatch,
    InvalidConfig,
    LengthMismatch,
    NonFiniteLoss,
    RankOutOfRange,
    StaleCache,
)
from taskfed.lora import (
    LoraAdapter,
    adapter_backward,
    adapter_forward,
    delta_from_bytes,
    delta_to_bytes,
    flatten_delta,
    init_adapter,
    load_delta,
)

Activation = Literal["tanh", "relu"]
Head = Literal["mse", "softmax_xent"]

ACTIVATIONS = ("tanh", "relu")
HEADS = ("mse", "softmax_xent")


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    rank: int
    activation: Activation = "tanh"
    head: Head = "mse"
    lora_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise InvalidConfig(f"layer_dims needs an input and an output size, got {self.layer_dims}")
        if self.activation not in ACTIVATIONS:
            raise InvalidConfig(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.head not in HEADS:
            raise InvalidConfig(f"head must be one of {HEADS}, got {self.head!r}")
        if not 1 <= self.rank <= self.max_rank:
            raise RankOutOfRange(f"rank {self.rank} outside [1, {self.max_rank}] for layers {self.layer_dims}")

    @property
    def max_rank(self) -> int:
        return min(min(v, d) for v, d in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def trainable_count(self) -> int:
        return sum(d * self.rank + self.rank * v for v, d in zip(self.layer_dims[:-1], self.layer_dims[1:]))

    @property
    def frozen_count(self) -> int:
        return sum(d * v for v, d in zip(self.layer_dims[:-1], self.layer_dims[1:]))


@dataclass(eq=False)
class ForwardCache:
    model_id: int
    version: int
    inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    upstream: np.ndarray


@dataclass(eq=False)
class AdaptedModel:
    layers: list[LoraAdapter]
    spec: ModelSpec
    _version: int = field(default=0, repr=False)

    @property
    def trainable_count(self) -> int:
        return sum(layer.delta_size for layer in self.layers)

    @property
    def frozen_count(self) -> int:
        return sum(layer.base.size for layer in self.layers)

    def segments(self) -> list[tuple[int, str, slice]]:
        """(layer, factor, slice) of every factor in the trainable layout."""
        out, offset = [], 0
        for i, layer in enumerate(self.layers):
            for name, size in (("B", layer.b_factor.size), ("A", layer.a_factor.size)):
                out.append((i, name, slice(offset, offset + size)))
                offset += size
        return out


def build_model(spec: ModelSpec, base_seed: int, adapter_seed: int, init_scale: float = 0.02) -> AdaptedModel:
    """Bases come from base_seed alone, so equal seeds give every client the same W⁰."""
    base_rng = np.random.default_rng(base_seed)
    adapter_seeds = np.random.SeedSequence(adapter_seed).spawn(len(spec.layer_dims) - 1)
    layers = []
    for (v, d), seed in zip(zip(spec.layer_dims[:-1], spec.layer_dims[1:]), adapter_seeds):
        base = base_rng.normal(0.0, 1.0 / np.sqrt(v), size=(d, v))
        layers.append(init_adapter(base, spec.rank, init_scale, seed, lora_scale=spec.lora_scale))
    return AdaptedModel(layers=layers, spec=spec)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if kind == "tanh" else (z > 0).astype(np.float64)


def _labels(y: np.ndarray, n: int, classes: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.size != n:
        raise DimensionMismatch(f"expected {n} class labels, got {y.size}")
    labels = y.astype(np.int64)
    if not np.array_equal(labels, y) or labels.min() < 0 or labels.max() >= classes:
        raise DimensionMismatch(f"class labels must be integers in [0, {classes})")
    return labels


def forward_loss(m: AdaptedModel, X: np.ndarray, y: np.ndarray) -> tuple[float, ForwardCache]:
    """Mean batch loss; X is n×v₀ with one sample per row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.spec.layer_dims[0] or X.shape[0] < 1:
        raise DimensionMismatch(f"inputs must be n×{m.spec.layer_dims[0]} with n ≥ 1, got shape {X.shape}")
    n = X.shape[0]
    h = X.T
    inputs, pre = [], []
    for i, layer in enumerate(m.layers):
        inputs.append(h)
        z = adapter_forward(layer, h)
        pre.append(z)
        if i < len(m.layers) - 1:
            h = _activate(m.spec.activation, z)
    out = pre[-1]
    out_dim = m.spec.layer_dims[-1]

    if m.spec.head == "mse":
        Y = np.asarray(y, dtype=np.float64)
        if Y.ndim == 1 and out_dim == 1:
            Y = Y[:, None]
        if Y.shape != (n, out_dim):
            raise DimensionMismatch(f"mse targets must be {n}×{out_dim}, got shape {np.shape(y)}")
        residual = out - Y.T
        loss = 0.5 * float(np.sum(residual * residual)) / n
        upstream = residual / n
    else:
        labels = _labels(y, n, out_dim)
        cols = np.arange(n)
        log_p = log_softmax(out, axis=0)
        loss = -float(np.mean(log_p[labels, cols]))
        upstream = softmax(out, axis=0)
        upstream[labels, cols] -= 1.0
        upstream /= n

    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    return loss, ForwardCache(id(m), m._version, inputs, pre, upstream)


def backward(m: AdaptedModel, cache: ForwardCache) -> np.ndarray:
    if cache.model_id != id(m) or cache.version != m._version:
        raise StaleCache("cache does not belong to the current parameters of this model")
    g = cache.upstream
    grads: list[np.ndarray] = [None] * len(m.layers)
    for i in range(len(m.layers) - 1, -1, -1):
        grad_b, grad_a, grad_x = adapter_backward(m.layers[i], cache.inputs[i], g)
        grads[i] = np.concatenate([grad_b.ravel(), grad_a.ravel()])
        if i > 0:
            g = grad_x * _activation_grad(m.spec.activation, cache.pre_activations[i - 1], cache.inputs[i])
    return np.concatenate(grads)


def trainable_vector(m: AdaptedModel) -> np.ndarray:
    return np.concatenate([flatten_delta(layer) for layer in m.layers])


def load_trainable(m: AdaptedModel, vector: np.ndarray) -> None:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.ndim != 1 or vector.size != m.trainable_count:
        raise LengthMismatch(f"trainable vector must have length {m.trainable_count}, got {vector.size}")
    offset = 0
    for layer in m.layers:
        load_delta(layer, vector[offset : offset + layer.delta_size])
        offset += layer.delta_size
    m._version += 1


def sgd_step(m: AdaptedModel, grad: np.ndarray, lr: float) -> None:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 1 or grad.size != m.trainable_count:
        raise LengthMismatch(f"gradient must have length {m.trainable_count}, got {grad.size}")
    if lr < 0:
        raise InvalidConfig(f"learning rate must be non-negative, got {lr}")
    load_trainable(m, trainable_vector(m) - lr * grad)


def save_checkpoint(m: AdaptedModel, path: str | Path) -> None:
    """JSON header line, then the trainable vector as little-endian float64."""
    header = asdict(m.spec)
    header["layer_dims"] = list(m.spec.layer_dims)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(delta_to_bytes(trainable_vector(m)))


def load_checkpoint(m: AdaptedModel, path: str | Path) -> None:
    raw = Path(path).read_bytes()
    head, _, payload = raw.partition(b"\n")
    header = json.loads(head)
    header["layer_dims"] = tuple(header["layer_dims"])
    if ModelSpec(**header) != m.spec:
        raise DimensionMismatch(f"checkpoint {path} was written for {header}, model is {m.spec}")
    load_trainable(m, delta_from_bytes(payload))
