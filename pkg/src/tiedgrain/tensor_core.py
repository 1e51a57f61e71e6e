"""Dense float64 tensor primitives and the SplitMix64 generator.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with at most
four dimensions. Every primitive here is a pure function of its inputs.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DimensionError, NumericError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

_U64_GAMMA = np.uint64(GOLDEN_GAMMA)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_next(state: int) -> tuple[int, int]:
    """Return ``(output, new_state)`` for one SplitMix64 step."""
    state = (state + GOLDEN_GAMMA) & MASK64
    return _mix(state), state


def derive_stream_seed(base_seed: int, layer_index: int) -> int:
    """Seed of an independent stream for ``layer_index`` under ``base_seed``."""
    if layer_index < 0:
        raise ConfigError(f"layer_index must be nonnegative, got {layer_index}")
    salt = ((layer_index + 1) * GOLDEN_GAMMA) & MASK64
    return splitmix64_next((base_seed & MASK64) ^ salt)[0]


class Rng:
    """Stateful wrapper over :func:`splitmix64_next`.

    The n-th output of SplitMix64 only depends on ``seed + n * gamma``, so
    block draws are vectorised and stay bit-identical to repeated
    :meth:`next_u64` calls.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        out, self.state = splitmix64_next(self.state)
        return out

    def u64_block(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * _U64_GAMMA
            out = _mix_array(states)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, n: int | None = None):
        """Floats in [0, 1) built from the top 53 bits of each output."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randbelow(self, n: int) -> int:
        return int(self.uniform() * n)

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller; 1 - u keeps the log argument in (0, 1].
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:half]))
        theta = 2.0 * np.pi * u[half:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        draws = self.uniform(n).tolist()
        for i in range(n - 1):
            j = i + int(draws[i] * (n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return np.asarray(idx, dtype=np.int64)


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=np.float64)
    if t.ndim > 4:
        raise DimensionError(f"tensors have at most 4 dims, got shape {t.shape}")
    return t


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"conv output size ({size}+2*{pad}-{k})/{stride}+1 is not integral"
        )
    return span // stride + 1


def _check_conv(x_shape, w_shape, stride, pad):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x_shape}, {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise DimensionError(f"channel mismatch: input {x_shape} vs kernel {w_shape}")
    kh, kw = w_shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel sizes must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return (
        conv_output_size(x_shape[2], kh, stride, pad),
        conv_output_size(x_shape[3], kw, stride, pad),
    )


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # (N, C, H', W', kh, kw)
    return win[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding: (N,C,H,W) * (F,C,kh,kw) -> (N,F,H',W')."""
    _check_conv(x.shape, w.shape, stride, pad)
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    return np.ascontiguousarray(np.einsum("nchwij,fcij->nfhw", win, w, optimize=True))


def conv2d_backward(dy, x, w, stride=1, pad=0):
    """Gradients ``(dx, dw)`` of :func:`conv2d` given upstream ``dy``."""
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, pad)
    dw = np.einsum("nchwij,nfhw->fcij", win, dy, optimize=True)
    n, c, h, wd = x.shape
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    ho, wo = dy.shape[2:]
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nfhw,fc->nchw", dy, w[:, :, i, j], optimize=True)
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += contrib
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw


def conv2d_flops(n: int, f: int, c: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return 2 * n * f * c * kh * kw * ho * wo


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)
