"""Static boolean weight masks regenerated on demand from a small spec.

Three schemes are supported:

* ``exact_count``: keep exactly ``round(density * n)`` positions, chosen by a
  partial Fisher-Yates shuffle of the flat indices.
* ``bernoulli``: keep each position independently with probability ``density``.
* ``two_to_four``: keep 2 of every aligned group of 4 along the fan-in axis.

Masks never need to be stored: ``generate_mask(spec)`` is deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor_core import Rng, derive_stream_seed, round_half_away

SCHEMES = ("exact_count", "bernoulli", "two_to_four")

# every way of keeping 2 of 4 positions, as a (6, 4) boolean table
_PAIRS = np.zeros((6, 4), dtype=bool)
for _row, (_a, _b) in enumerate(combinations(range(4), 2)):
    _PAIRS[_row, [_a, _b]] = True


@dataclass(frozen=True)
class MaskSpec:
    shape: tuple
    density: float = 1.0
    scheme: str = "exact_count"
    base_seed: int = 0
    layer_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown mask scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not (0.0 <= self.density <= 1.0) or math.isnan(self.density):
            raise ConfigError(f"density must lie in [0, 1], got {self.density}")
        if any(s <= 0 for s in self.shape):
            raise ConfigError(f"mask shape must be positive, got {self.shape}")

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray
    kept_count: int
    spec: MaskSpec

    @property
    def density(self) -> float:
        return self.kept_count / self.bits.size

    def regenerate(self) -> "Mask":
        return generate_mask(self.spec)


def fan_in_view(shape) -> tuple[int, int]:
    """2-d (rows, fan_in) view used by the 2:4 scheme.

    Dense weights are (out, in); conv kernels (F, C, kh, kw) group along the
    flattened C*kh*kw fan-in.
    """
    shape = tuple(shape)
    if len(shape) == 1:
        return 1, shape[0]
    return shape[0], math.prod(shape[1:])


def _exact_count(n, density, rng):
    k = round_half_away(density * n)
    idx = list(range(n))
    draws = rng.uniform(k).tolist()
    for i in range(min(k, n - 1)):
        j = i + int(draws[i] * (n - i))
        idx[i], idx[j] = idx[j], idx[i]
    bits = np.zeros(n, dtype=bool)
    bits[idx[:k]] = True
    return bits


def _two_to_four(shape, rng):
    rows, fan_in = fan_in_view(shape)
    groups, tail = divmod(fan_in, 4)
    bits = np.zeros((rows, fan_in), dtype=bool)
    if groups:
        choice = (rng.uniform(rows * groups) * 6).astype(np.int64)
        bits[:, : groups * 4] = _PAIRS[choice].reshape(rows, groups * 4)
    if tail:
        keep = math.ceil(tail / 2)
        for r in range(rows):
            pos = list(range(tail))
            for i in range(keep):
                j = i + rng.randbelow(tail - i)
                pos[i], pos[j] = pos[j], pos[i]
            bits[r, groups * 4 + np.asarray(pos[:keep])] = True
    return bits.reshape(-1)


def generate_mask(spec: MaskSpec) -> Mask:
    rng = Rng(derive_stream_seed(spec.base_seed, spec.layer_index))
    n = spec.size
    if spec.scheme == "exact_count":
        flat = _exact_count(n, spec.density, rng)
    elif spec.scheme == "bernoulli":
        flat = rng.uniform(n) < spec.density
    else:
        flat = _two_to_four(spec.shape, rng)
    bits = flat.reshape(spec.shape)
    bits.flags.writeable = False
    return Mask(bits=bits, kept_count=int(flat.sum()), spec=spec)


def effective_param_count(masks) -> int:
    """Number of positions kept by at least one mask."""
    masks = list(masks)
    if not masks:
        raise ConfigError("effective_param_count needs at least one mask")
    shape = masks[0].bits.shape
    union = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.bits.shape != shape:
            raise DimensionError(f"mask shapes differ: {shape} vs {m.bits.shape}")
        union |= m.bits
    return int(union.sum())


def expected_kept_fraction(sparsity: float, depth: int) -> float:
    """Expected fraction of weights touched by ``depth`` independent masks: 1 - s**K."""
    if not 0.0 <= sparsity <= 1.0:
        raise ConfigError(f"sparsity must lie in [0, 1], got {sparsity}")
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    return 1.0 - sparsity**depth


def validate_two_four(mask) -> bool:
    """True iff every aligned group of 4 along the fan-in keeps exactly 2.

    A trailing partial group of length L must keep ceil(L/2). Accepts a
    :class:`Mask` or a raw boolean array.
    """
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    rows, fan_in = fan_in_view(bits.shape)
    flat = bits.reshape(rows, fan_in)
    groups, tail = divmod(fan_in, 4)
    if groups and not np.all(flat[:, : groups * 4].reshape(rows, groups, 4).sum(-1) == 2):
        return False
    if tail and not np.all(flat[:, groups * 4 :].sum(-1) == math.ceil(tail / 2)):
        return False
    return True


def hamming_distance(a: Mask, b: Mask) -> int:
    if a.bits.shape != b.bits.shape:
        raise DimensionError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    return int(np.count_nonzero(a.bits != b.bits))
