"""Multi-mask low-rank adapters on frozen dense weights.

The adapter update is a bare sum over ``depth`` masked low-rank products::

    delta = sum_i (m_i1 * B) @ (m_i2 * A)

with no alpha/r or 1/depth scaling, so any scaling lives in the learning
rate. With ``depth=1`` and ``density=1.0`` this is ordinary LoRA.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .masking import MaskSpec, generate_mask
from .tensor_core import Rng


@dataclass(frozen=True, eq=False)
class LoRAAdapter:
    A: np.ndarray  # (r, d2)
    B: np.ndarray  # (d1, r)
    depth: int = 1
    base_seed: int = 0
    density: float = 1.0
    scheme: str = "exact_count"
    _masks: list = field(default=None, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[1]:
            raise DimensionError(f"need A (r, d2) and B (d1, r), got {A.shape} and {B.shape}")
        if self.depth < 1:
            raise ConfigError(f"adapter depth must be >= 1, got {self.depth}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self._masks is None:
            object.__setattr__(self, "_masks", self._build_masks())

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple:
        return (self.B.shape[0], self.A.shape[1])

    def mask_spec(self, i: int, slot: int) -> MaskSpec:
        """Mask for term ``i`` (1-based) and slot 1 (on B) or 2 (on A)."""
        shape = self.B.shape if slot == 1 else self.A.shape
        return MaskSpec(shape, self.density, self.scheme, self.base_seed, 2 * i + slot)

    def _build_masks(self):
        if self.density == 1.0 and self.scheme != "two_to_four":
            return [(None, None)] * self.depth
        return [
            (generate_mask(self.mask_spec(i, 1)).bits, generate_mask(self.mask_spec(i, 2)).bits)
            for i in range(1, self.depth + 1)
        ]

    def masked_terms(self):
        """Yield ``(m1 * B, m2 * A)`` for every term."""
        for mb, ma in self._masks:
            yield (self.B if mb is None else self.B * mb), (self.A if ma is None else self.A * ma)

    def with_factors(self, A, B) -> "LoRAAdapter":
        return replace(self, A=A, B=B)

    def trainable_count(self) -> int:
        return self.A.size + self.B.size


def init_adapter(d1, d2, rank, depth=1, seed=0, density=1.0, scheme="exact_count", mask_seed=None):
    """Gaussian A scaled by 1/sqrt(d2), zero B, so the adapter starts as a no-op."""
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    if rank > min(d1, d2) / 4:
        warnings.warn(f"adapter rank {rank} is not small relative to {d1}x{d2}", stacklevel=2)
    A = Rng(seed).normal(rank * d2).reshape(rank, d2) / np.sqrt(d2)
    B = np.zeros((d1, rank))
    return LoRAAdapter(A, B, depth, seed if mask_seed is None else mask_seed, density, scheme)


def lora_delta(adapter: LoRAAdapter) -> np.ndarray:
    delta = np.zeros(adapter.shape)
    for b, a in adapter.masked_terms():
        delta += b @ a
    return delta


def _check_base(adapter, W_base):
    if W_base.shape != adapter.shape:
        raise DimensionError(f"base weight {W_base.shape} does not match adapter {adapter.shape}")


def lora_forward(adapter: LoRAAdapter, W_base, x) -> np.ndarray:
    """``x @ (W_base + delta).T`` with the adapter kept factored."""
    W_base = np.asarray(W_base, dtype=np.float64)
    _check_base(adapter, W_base)
    if x.shape[-1] != W_base.shape[1]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weight {W_base.shape}")
    y = x @ W_base.T
    for b, a in adapter.masked_terms():
        y = y + (x @ a.T) @ b.T
    return y


def lora_grads(adapter: LoRAAdapter, d_delta):
    """Gradients ``(dA, dB)`` given the gradient of the loss wrt the effective weight."""
    dA = np.zeros_like(adapter.A)
    dB = np.zeros_like(adapter.B)
    for (b, a), (mb, ma) in zip(adapter.masked_terms(), adapter._masks):
        gb = d_delta @ a.T
        ga = b.T @ d_delta
        dB += gb if mb is None else gb * mb
        dA += ga if ma is None else ga * ma
    return dA, dB


def lora_backward(adapter: LoRAAdapter, W_base, x, dy):
    """Backward of :func:`lora_forward`; returns ``(dA, dB, dx)``. W_base gets no gradient."""
    dA, dB = lora_grads(adapter, dy.T @ x)
    dx = dy @ (np.asarray(W_base, dtype=np.float64) + lora_delta(adapter))
    return dA, dB, dx


def lora_merge(adapter: LoRAAdapter, W_base) -> np.ndarray:
    W_base = np.asarray(W_base, dtype=np.float64)
    _check_base(adapter, W_base)
    return W_base + lora_delta(adapter)
