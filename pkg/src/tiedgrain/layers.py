"""Layer building blocks with hand-written forward and backward passes.

A layer is described by a :class:`LayerConfig`; its parameters live in a
plain dict keyed by suffix (``W``, ``b``, ``g``). ``residual_add`` adds the
input of the enclosing sequence, which is how skip connections are written
in a flat layer list.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .tensor_core import conv2d, conv2d_backward, conv_output_size

KINDS = (
    "dense",
    "conv",
    "relu",
    "tanh",
    "norm",
    "residual_add",
    "flatten",
    "avgpool",
    "classifier_head",
)
LINEAR_KINDS = ("dense", "conv", "classifier_head")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    width: int | None = None
    kernel: int = 3
    stride: int = 1
    pad: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in LINEAR_KINDS and (self.width is None or self.width < 1):
            raise ConfigError(f"{self.kind} layer needs a positive width")

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.pad is None else self.pad

    @classmethod
    def from_dict(cls, d) -> "LayerConfig":
        if isinstance(d, cls):
            return d
        unknown = set(d) - {"kind", "width", "kernel", "stride", "pad"}
        if unknown:
            raise ConfigError(f"unknown layer keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        if self.kind != "conv":
            d.pop("kernel", None)
            d.pop("stride", None)
        return d


def output_shape(cfg: LayerConfig, shape: tuple) -> tuple:
    """Per-sample output shape of ``cfg`` applied to per-sample ``shape``."""
    kind = cfg.kind
    if kind in ("dense", "classifier_head"):
        if len(shape) != 1:
            raise ConfigError(f"{kind} expects a flat input, got shape {shape}")
        return (cfg.width,)
    if kind == "conv":
        if len(shape) != 3:
            raise ConfigError(f"conv expects (C, H, W) input, got shape {shape}")
        if cfg.kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {cfg.kernel}")
        h = conv_output_size(shape[1], cfg.kernel, cfg.stride, cfg.padding)
        w = conv_output_size(shape[2], cfg.kernel, cfg.stride, cfg.padding)
        return (cfg.width, h, w)
    if kind == "flatten":
        return (math.prod(shape),)
    if kind == "avgpool":
        if len(shape) != 3:
            raise ConfigError(f"avgpool expects (C, H, W) input, got shape {shape}")
        return (shape[0],)
    return tuple(shape)


def param_shapes(cfg: LayerConfig, shape: tuple) -> dict:
    if cfg.kind in ("dense", "classifier_head"):
        return {"W": (cfg.width, shape[0]), "b": (cfg.width,)}
    if cfg.kind == "conv":
        return {"W": (cfg.width, shape[0], cfg.kernel, cfg.kernel), "b": (cfg.width,)}
    if cfg.kind == "norm":
        return {"g": (shape[0],), "b": (shape[0],)}
    return {}


def init_params(cfg: LayerConfig, shape: tuple, rng, gain: float = 1.0) -> dict:
    """He-uniform weights, zero biases, unit norm gains."""
    out = {}
    for name, pshape in param_shapes(cfg, shape).items():
        if name == "W":
            fan_in = math.prod(pshape[1:])
            bound = gain * math.sqrt(6.0 / fan_in)
            out[name] = (2.0 * rng.uniform(math.prod(pshape)) - 1.0).reshape(pshape) * bound
        elif name == "g":
            out[name] = np.ones(pshape)
        else:
            out[name] = np.zeros(pshape)
    return out


def _channel_view(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def forward(cfg: LayerConfig, p: dict, x: np.ndarray, seq_in: np.ndarray):
    kind = cfg.kind
    if kind in ("dense", "classifier_head"):
        return x @ p["W"].T + p["b"], x
    if kind == "conv":
        y = conv2d(x, p["W"], cfg.stride, cfg.padding)
        return y + _channel_view(p["b"], 4), x
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    if kind == "norm":
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - mu) * inv
        y = xhat * _channel_view(p["g"], x.ndim) + _channel_view(p["b"], x.ndim)
        return y, (xhat, inv)
    if kind == "residual_add":
        if seq_in.shape != x.shape:
            raise ConfigError(f"residual_add shape mismatch {x.shape} vs {seq_in.shape}")
        return x + seq_in, None
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if kind == "avgpool":
        return x.mean(axis=(2, 3)), x.shape
    raise AssertionError(kind)


def backward(cfg: LayerConfig, p: dict, dy: np.ndarray, cache, need_param_grads=True):
    """Return ``(dx, param_grads, d_seq_in)``; ``d_seq_in`` is None unless residual."""
    kind = cfg.kind
    if kind in ("dense", "classifier_head"):
        x = cache
        grads = {"W": dy.T @ x, "b": dy.sum(axis=0)} if need_param_grads else {}
        return dy @ p["W"], grads, None
    if kind == "conv":
        x = cache
        dx, dw = conv2d_backward(dy, x, p["W"], cfg.stride, cfg.padding)
        grads = {"W": dw, "b": dy.sum(axis=(0, 2, 3))} if need_param_grads else {}
        return dx, grads, None
    if kind == "relu":
        return dy * cache, {}, None
    if kind == "tanh":
        return dy * (1.0 - cache * cache), {}, None
    if kind == "norm":
        xhat, inv = cache
        axes = tuple(range(1, dy.ndim))
        dxhat = dy * _channel_view(p["g"], dy.ndim)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        grads = {}
        if need_param_grads:
            red = (0,) + tuple(range(2, dy.ndim))
            grads = {"g": (dy * xhat).sum(axis=red), "b": dy.sum(axis=red)}
        return dx, grads, None
    if kind == "residual_add":
        return dy, {}, dy
    if kind == "flatten":
        return dy.reshape(cache), {}, None
    if kind == "avgpool":
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).copy(), {}, None
    raise AssertionError(kind)


def linear_flops(cfg: LayerConfig, in_shape: tuple, nnz: int) -> int:
    """Multiply-accumulate FLOPs per sample: 2 * nnz(W) * output positions."""
    if cfg.kind in ("dense", "classifier_head"):
        return 2 * nnz
    if cfg.kind == "conv":
        _, h, w = output_shape(cfg, in_shape)
        return 2 * nnz * h * w
    return 0


def run_sequence(layers, params, x, inject_at=None, injection=None, keep_caches=True):
    """Apply ``layers`` with per-layer param dicts ``params``.

    ``injection`` is added to the output of layer ``inject_at``.
    """
    h = x
    caches = [] if keep_caches else None
    for i, cfg in enumerate(layers):
        h, cache = forward(cfg, params[i], h, x)
        if i == inject_at:
            h = h + injection
        if keep_caches:
            caches.append(cache)
    return h, caches


def run_sequence_backward(layers, params, dy, caches, inject_at=None, need_param_grads=True):
    """Backward of :func:`run_sequence`; returns ``(dx, grads_per_layer, d_injection)``."""
    grads = [None] * len(layers)
    d_seq = None
    d_inj = None
    for i in range(len(layers) - 1, -1, -1):
        if i == inject_at:
            d_inj = dy
        dy, g, ds = backward(layers[i], params[i], dy, caches[i], need_param_grads)
        grads[i] = g
        if ds is not None:
            d_seq = ds if d_seq is None else d_seq + ds
    if d_seq is not None:
        dy = dy + d_seq
    return dy, grads, d_inj
