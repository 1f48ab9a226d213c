"""Low-rank adapter over a frozen base linear map.

h = W⁰x + s·B(Ax) with W⁰ (d×v) frozen, B (d×r) and A (r×v) trainable and
s the optional lora_scale (1.0 unless configured). Inputs are either a single
length-v vector or a v×n batch with one sample per column.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from taskfed.exceptions import DimensionMismatch, InvalidConfig, LengthMismatch, RankOutOfRange

SeedLike = int | np.random.SeedSequence

WIRE_DTYPE = np.dtype("<f8")


@dataclass(eq=False)
class LoraAdapter:
    base: np.ndarray
    b_factor: np.ndarray
    a_factor: np.ndarray
    lora_scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.b_factor.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base.shape[0]

    @property
    def in_dim(self) -> int:
        return self.base.shape[1]

    @property
    def delta_size(self) -> int:
        return self.b_factor.size + self.a_factor.size


def init_adapter(
    base: np.ndarray,
    rank: int,
    init_scale: float,
    seed: SeedLike,
    lora_scale: float = 1.0,
) -> LoraAdapter:
    """B ~ N(0, init_scale²) and A = 0, so B·A is exactly zero after init."""
    base = np.array(base, dtype=np.float64)
    if base.ndim != 2:
        raise DimensionMismatch(f"base must be a matrix, got shape {base.shape}")
    d, v = base.shape
    if not 1 <= rank <= min(d, v):
        raise RankOutOfRange(f"rank {rank} outside [1, {min(d, v)}] for a {d}x{v} base")
    if init_scale <= 0:
        raise InvalidConfig(f"init_scale must be positive, got {init_scale}")
    base.setflags(write=False)
    rng = np.random.default_rng(seed)
    return LoraAdapter(
        base=base,
        b_factor=rng.normal(0.0, init_scale, size=(d, rank)),
        a_factor=np.zeros((rank, v)),
        lora_scale=lora_scale,
    )


def _check_input(ad: LoraAdapter, x: np.ndarray) -> None:
    if x.ndim not in (1, 2) or x.shape[0] != ad.in_dim:
        raise DimensionMismatch(f"adapter expects inputs of length {ad.in_dim}, got shape {x.shape}")


def adapter_forward(ad: LoraAdapter, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_input(ad, x)
    # two rank-r products, B·A is never formed here
    return ad.base @ x + ad.lora_scale * (ad.b_factor @ (ad.a_factor @ x))


def adapter_backward(
    ad: LoraAdapter, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss given g = dL/dh.

    Batched inputs sum the per-column contributions; any 1/n of a mean loss
    is expected to be folded into g already.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    _check_input(ad, x)
    if g.shape[0] != ad.out_dim or g.ndim != x.ndim or (x.ndim == 2 and g.shape[1] != x.shape[1]):
        raise DimensionMismatch(f"upstream shape {g.shape} does not match output of input shape {x.shape}")
    s = ad.lora_scale
    ax = ad.a_factor @ x
    btg = ad.b_factor.T @ g
    if x.ndim == 1:
        grad_b = s * np.outer(g, ax)
        grad_a = s * np.outer(btg, x)
    else:
        grad_b = s * (g @ ax.T)
        grad_a = s * (btg @ x.T)
    grad_x = ad.base.T @ g + s * (ad.a_factor.T @ btg)
    return grad_b, grad_a, grad_x


def merge(ad: LoraAdapter) -> np.ndarray:
    return ad.base + ad.lora_scale * (ad.b_factor @ ad.a_factor)


def flatten_delta(ad: LoraAdapter) -> np.ndarray:
    """Row-major B followed by row-major A."""
    return np.concatenate([ad.b_factor.ravel(), ad.a_factor.ravel()])


def load_delta(ad: LoraAdapter, vec: np.ndarray) -> LoraAdapter:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1 or vec.size != ad.delta_size:
        raise LengthMismatch(f"delta vector must have length {ad.delta_size}, got {vec.size}")
    nb = ad.b_factor.size
    ad.b_factor[...] = vec[:nb].reshape(ad.b_factor.shape)
    ad.a_factor[...] = vec[nb:].reshape(ad.a_factor.shape)
    return ad


def delta_to_bytes(vec: np.ndarray) -> bytes:
    return np.asarray(vec, dtype=WIRE_DTYPE).tobytes()


def delta_from_bytes(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype=WIRE_DTYPE).astype(np.float64)
