"""Explicit, weight-tied and multi-mask weight-tied networks.

A network is ``stem -> tied block -> head``. The tied block applies one
parameterised sequence ``f`` K times; in multi-mask mode step ``i`` uses the
weights ``W * m_i`` with its own static mask. With input injection every
step adds ``U x0`` right after the first linear layer of ``f`` (before its
activation), so the block reads ``z_{i+1} = f(z_i; x0)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .errors import ConfigError, DimensionError
from .masking import SCHEMES, Mask, MaskSpec, effective_param_count, generate_mask
from .tensor_core import Rng, conv2d, conv2d_backward, derive_stream_seed

MASK_MODES = ("dense", "same_mask", "multi_mask")


@dataclass(frozen=True)
class NetworkConfig:
    input_shape: tuple
    stem: tuple = ()
    tied: tuple = ()
    head: tuple = ()
    K: int = 1
    mask_mode: str = "dense"
    density: float = 1.0
    scheme: str = "exact_count"
    input_injection: bool = False
    shared: bool = True
    init_gain: float = 1.0
    mask_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        for part in ("stem", "tied", "head"):
            object.__setattr__(
                self, part, tuple(L.LayerConfig.from_dict(c) for c in getattr(self, part))
            )
        if self.K < 1:
            raise ConfigError(f"tied depth K must be >= 1, got {self.K}")
        if not self.tied:
            raise ConfigError("tied block needs at least one layer")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask_mode {self.mask_mode!r}; expected one of {MASK_MODES}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown mask scheme {self.scheme!r}")
        if not 0.0 <= self.density <= 1.0:
            raise ConfigError(f"density must lie in [0, 1], got {self.density}")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown network keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "stem": [c.to_dict() for c in self.stem],
            "tied": [c.to_dict() for c in self.tied],
            "head": [c.to_dict() for c in self.head],
            "K": self.K,
            "mask_mode": self.mask_mode,
            "density": self.density,
            "scheme": self.scheme,
            "input_injection": self.input_injection,
            "shared": self.shared,
            "init_gain": self.init_gain,
            "mask_seed": self.mask_seed,
        }


@dataclass(frozen=True)
class _Layout:
    """Shapes and parameter names resolved once per config."""

    stem_shapes: tuple
    tied_shapes: tuple
    head_shapes: tuple
    tied_in: tuple
    out_shape: tuple
    inject_at: int | None
    inject_shape: tuple | None


def _walk(layers, shape, where):
    shapes = []
    for i, cfg in enumerate(layers):
        shapes.append(shape)
        try:
            shape = L.output_shape(cfg, shape)
        except ConfigError as exc:
            raise ConfigError(str(exc), path=f"{where}[{i}] ({cfg.kind})") from None
    return tuple(shapes), shape


def resolve_layout(cfg: NetworkConfig) -> _Layout:
    stem_shapes, tied_in = _walk(cfg.stem, cfg.input_shape, "stem")
    tied_shapes, tied_out = _walk(cfg.tied, tied_in, "tied")
    if tied_out != tied_in:
        raise ConfigError(
            f"tied block maps {tied_in} -> {tied_out}; recursion needs equal shapes",
            path="tied",
        )
    head_shapes, out_shape = _walk(cfg.head, tied_out, "head")
    inject_at = inject_shape = None
    if cfg.input_injection:
        linear = [i for i, c in enumerate(cfg.tied) if c.kind in L.LINEAR_KINDS]
        if not linear:
            raise ConfigError("input injection needs a linear layer inside the tied block", "tied")
        inject_at = linear[0]
        inject_shape = L.output_shape(cfg.tied[inject_at], tied_shapes[inject_at])
        if len(inject_shape) == 3 and inject_shape[1:] != tied_in[1:]:
            raise ConfigError("conv injection needs the first tied conv to keep spatial size", "tied")
    return _Layout(stem_shapes, tied_shapes, head_shapes, tied_in, out_shape, inject_at, inject_shape)


def _pname(section, i, suffix):
    return f"{section}.{i}.{suffix}"


def tied_section(cfg: NetworkConfig, step: int) -> str:
    return "tied" if cfg.shared else f"untied{step}"


@dataclass(frozen=True, eq=False)
class Network:
    config: NetworkConfig
    params: dict
    param_seed: int = 0
    layout: _Layout = field(default=None, repr=False)
    _mask_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.layout is None:
            object.__setattr__(self, "layout", resolve_layout(self.config))

    def with_params(self, params: dict) -> "Network":
        return replace(self, params=params)

    def tied_param_names(self, step: int = 0) -> list:
        sec = tied_section(self.config, step)
        names = []
        for i, (c, s) in enumerate(zip(self.config.tied, self.layout.tied_shapes)):
            names += [_pname(sec, i, k) for k in L.param_shapes(c, s)]
        return names

    def masked_param_names(self, step: int = 0) -> list:
        sec = tied_section(self.config, step)
        return [
            _pname(sec, i, "W")
            for i, c in enumerate(self.config.tied)
            if c.kind in L.LINEAR_KINDS
        ]

    def mask_spec(self, name: str, step: int) -> MaskSpec | None:
        cfg = self.config
        if cfg.mask_mode == "dense":
            return None
        ordinal = self.masked_param_names(0).index(name.replace(f"untied{step}.", "tied.", 1))
        layer_index = step if cfg.mask_mode == "multi_mask" else 0
        return MaskSpec(
            shape=self.params[name].shape,
            density=cfg.density,
            scheme=cfg.scheme,
            base_seed=derive_stream_seed(cfg.mask_seed, ordinal),
            layer_index=layer_index,
        )

    def mask(self, name: str, step: int) -> Mask | None:
        spec = self.mask_spec(name, step)
        if spec is None:
            return None
        if spec not in self._mask_cache:
            self._mask_cache[spec] = generate_mask(spec)
        return self._mask_cache[spec]

    def step_params(self, step: int) -> list:
        """Per-layer parameter dicts for tied step ``step`` with masks applied."""
        sec = tied_section(self.config, step)
        out = []
        for i, (c, s) in enumerate(zip(self.config.tied, self.layout.tied_shapes)):
            p = {}
            for k in L.param_shapes(c, s):
                name = _pname(sec, i, k)
                value = self.params[name]
                m = self.mask(name, step) if k == "W" else None
                p[k] = value * m.bits if m is not None else value
            out.append(p)
        return out

    def section_params(self, section: str) -> list:
        layers = getattr(self.config, section)
        shapes = getattr(self.layout, f"{section}_shapes")
        return [
            {k: self.params[_pname(section, i, k)] for k in L.param_shapes(c, s)}
            for i, (c, s) in enumerate(zip(layers, shapes))
        ]


def build_network(cfg: NetworkConfig | dict, param_seed: int = 0) -> Network:
    """Materialise parameters for ``cfg`` deterministically from ``param_seed``."""
    if isinstance(cfg, dict):
        cfg = NetworkConfig.from_dict(cfg)
    layout = resolve_layout(cfg)
    rng = Rng(param_seed)
    params = {}

    def add(section, layer_list, shapes, gain=1.0):
        for i, (c, s) in enumerate(zip(layer_list, shapes)):
            for k, v in L.init_params(c, s, rng, gain).items():
                params[_pname(section, i, k)] = v

    add("stem", cfg.stem, layout.stem_shapes)
    for step in range(cfg.K if not cfg.shared else 1):
        add(tied_section(cfg, step), cfg.tied, layout.tied_shapes, cfg.init_gain)
    if cfg.input_injection:
        fan_in = layout.tied_in[0]
        out = layout.inject_shape[0]
        shape = (out, fan_in) if len(layout.tied_in) == 1 else (out, fan_in, 1, 1)
        bound = cfg.init_gain * math.sqrt(6.0 / fan_in)
        params["inject.U"] = (2.0 * rng.uniform(math.prod(shape)) - 1.0).reshape(shape) * bound
    add("head", cfg.head, layout.head_shapes)
    return Network(cfg, params, param_seed, layout)


# -- injection -------------------------------------------------------------


def _inject_forward(U, x0):
    if U.ndim == 2:
        return x0 @ U.T
    return conv2d(x0, U)


def _inject_backward(U, x0, d_inj):
    if U.ndim == 2:
        return d_inj.T @ x0, d_inj @ U
    dx, dU = conv2d_backward(d_inj, x0, U)
    return dU, dx


# -- tied block ------------------------------------------------------------


@dataclass
class TiedTrace:
    x0: np.ndarray
    z_init: np.ndarray
    injection: np.ndarray | None
    step_caches: list
    outputs: list
    start: str


def _check_tied_input(net, x0):
    if x0.shape[1:] != net.layout.tied_in:
        raise DimensionError(
            f"tied block expects per-sample shape {net.layout.tied_in}, got {x0.shape[1:]}"
        )


def tied_block_forward(net: Network, x0, trace=False, steps=None, start="input"):
    """Run the tied recursion.

    ``steps`` defaults to K; ``start`` is ``"input"`` (z_0 = x0, the
    weight-tied reading) or ``"zeros"`` (z_0 = 0, the equilibrium reading).
    Returns ``(z_T, TiedTrace or None)``.
    """
    _check_tied_input(net, x0)
    steps = net.config.K if steps is None else steps
    inj = None
    if net.config.input_injection:
        inj = _inject_forward(net.params["inject.U"], x0)
    z = x0 if start == "input" else np.zeros_like(x0)
    z_init = z
    caches, outputs = [], []
    for i in range(steps):
        z, c = L.run_sequence(
            net.config.tied, net.step_params(i), z, net.layout.inject_at, inj, keep_caches=trace
        )
        if trace:
            caches.append(c)
            outputs.append(z)
    if not trace:
        return z, None
    return z, TiedTrace(x0, z_init, inj, caches, outputs, start)


def _accumulate(grads, net, step, layer_grads):
    sec = tied_section(net.config, step)
    for i, g in enumerate(layer_grads):
        for k, v in g.items():
            name = _pname(sec, i, k)
            m = net.mask(name, step) if k == "W" else None
            if m is not None:
                v = v * m.bits
            if name in grads:
                grads[name] += v
            else:
                grads[name] = v.copy()


def tied_block_backward(net: Network, dz, tr: TiedTrace):
    """Backprop through time; returns ``(grads, dx0)``.

    The gradient of a shared weight is the mask-weighted sum of its local
    gradients over all steps.
    """
    if tr is None:
        raise ConfigError("backward needs a trace from tied_block_forward(trace=True)")
    grads = {}
    d_inj_total = None
    for i in range(len(tr.step_caches) - 1, -1, -1):
        dz, layer_grads, d_inj = L.run_sequence_backward(
            net.config.tied, net.step_params(i), dz, tr.step_caches[i], net.layout.inject_at
        )
        _accumulate(grads, net, i, layer_grads)
        if d_inj is not None:
            d_inj_total = d_inj if d_inj_total is None else d_inj_total + d_inj
    dx0 = dz if tr.start == "input" else np.zeros_like(tr.x0)
    if net.config.input_injection:
        if d_inj_total is None:
            d_inj_total = np.zeros_like(tr.injection)
        dU, dx_inj = _inject_backward(net.params["inject.U"], tr.x0, d_inj_total)
        grads["inject.U"] = dU
        dx0 = dx0 + dx_inj
    return grads, dx0


# -- whole network ---------------------------------------------------------


@dataclass
class ActivationTrace:
    x: np.ndarray
    stem_caches: list
    tied: TiedTrace
    head_caches: list
    labels: list
    activations: list


def forward(net: Network, x, trace=False):
    """Full forward ``stem -> tied -> head``; returns ``(output, ActivationTrace or None)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.config.input_shape:
        raise DimensionError(
            f"network expects per-sample shape {net.config.input_shape}, got {x.shape[1:]}"
        )
    h, stem_c = L.run_sequence(net.config.stem, net.section_params("stem"), x, keep_caches=trace)
    x0 = h
    z, tied_tr = tied_block_forward(net, x0, trace=trace)
    out, head_c = L.run_sequence(net.config.head, net.section_params("head"), z, keep_caches=trace)
    if not trace:
        return out, None
    labels, acts = [], []
    if net.config.stem:
        labels.append("stem")
        acts.append(x0)
    for i, a in enumerate(tied_tr.outputs):
        labels.append(f"tied{i + 1}")
        acts.append(a)
    if net.config.head:
        labels.append("head")
        acts.append(out)
    return out, ActivationTrace(x, stem_c, tied_tr, head_c, labels, acts)


def _section_grads(section, layer_grads, grads):
    for i, g in enumerate(layer_grads):
        for k, v in g.items():
            grads[_pname(section, i, k)] = v


def head_backward(net: Network, dout, head_caches):
    dz, hg, _ = L.run_sequence_backward(
        net.config.head, net.section_params("head"), dout, head_caches
    )
    grads = {}
    _section_grads("head", hg, grads)
    return grads, dz


def stem_backward(net: Network, dx0, stem_caches):
    dx, sg, _ = L.run_sequence_backward(
        net.config.stem, net.section_params("stem"), dx0, stem_caches
    )
    grads = {}
    _section_grads("stem", sg, grads)
    return grads, dx


def backward(net: Network, loss_grad, trace: ActivationTrace) -> dict:
    """Gradients of every parameter given dLoss/dOutput and a forward trace."""
    if trace is None:
        raise ConfigError("backward needs a trace from forward(trace=True)")
    grads, dz = head_backward(net, loss_grad, trace.head_caches)
    tg, dx0 = tied_block_backward(net, dz, trace.tied)
    grads.update(tg)
    sg, _ = stem_backward(net, dx0, trace.stem_caches)
    grads.update(sg)
    for name, p in net.params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return grads


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient wrt ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# -- accounting ------------------------------------------------------------


def count_params(net: Network, effective: bool = False) -> int:
    """Stored parameter count, or the count of weights actually used by some mask."""
    total = sum(p.size for p in net.params.values())
    if not effective or net.config.mask_mode == "dense":
        return total
    cfg = net.config
    steps = range(cfg.K)
    for name in net.masked_param_names(0):
        if cfg.shared:
            masks = [net.mask(name, i) for i in steps]
            total -= net.params[name].size - effective_param_count(masks)
        else:
            for i in steps:
                uname = name.replace("tied.", f"untied{i}.", 1)
                total -= net.params[uname].size - net.mask(uname, i).kept_count
    return total


def _section_flops(layer_list, shapes, nnz_of=None):
    total = 0
    for i, (c, s) in enumerate(zip(layer_list, shapes)):
        if c.kind in L.LINEAR_KINDS:
            nnz = nnz_of(i) if nnz_of else math.prod(L.param_shapes(c, s)["W"])
            total += L.linear_flops(c, s, nnz)
    return total


def tied_step_flops(net: Network, step: int) -> int:
    cfg, lay = net.config, net.layout
    sec = tied_section(cfg, step)

    def nnz(i):
        name = _pname(sec, i, "W")
        m = net.mask(name, step)
        return m.kept_count if m is not None else net.params[name].size

    return _section_flops(cfg.tied, lay.tied_shapes, nnz)


def count_flops_forward(net: Network, batch: int, breakdown: bool = False):
    """Matmul/conv FLOPs of one forward pass over ``batch`` samples.

    Masked layers count only kept weights. Elementwise ops are not counted.
    The injection map is evaluated once per forward.
    """
    cfg, lay = net.config, net.layout
    parts = {
        "stem": _section_flops(cfg.stem, lay.stem_shapes),
        "tied": sum(tied_step_flops(net, i) for i in range(cfg.K)),
        "inject": 0,
        "head": _section_flops(cfg.head, lay.head_shapes),
    }
    if cfg.input_injection:
        U = net.params["inject.U"]
        positions = math.prod(lay.inject_shape[1:]) if len(lay.inject_shape) == 3 else 1
        parts["inject"] = 2 * U.size * positions
    parts = {k: v * batch for k, v in parts.items()}
    total = sum(parts.values())
    return (total, parts) if breakdown else total


# -- fixed-point view ------------------------------------------------------


class TiedStepMap:
    """One tied step as a map ``z -> f(z; x0)`` for equilibrium solvers.

    Uses the step-0 weights (and mask), so the map is the same at every
    iteration.
    """

    def __init__(self, net: Network, x0):
        cfg = net.config
        if not cfg.input_injection:
            raise ConfigError("equilibrium mode needs input_injection=true", "model.input_injection")
        if cfg.mask_mode == "multi_mask":
            raise ConfigError(
                "equilibrium mode needs a stationary map; use dense or same_mask",
                "model.mask_mode",
            )
        if not cfg.shared:
            raise ConfigError("equilibrium mode needs shared tied weights", "model.shared")
        _check_tied_input(net, x0)
        self.net = net
        self.x0 = x0
        self.params = net.step_params(0)
        self.injection = _inject_forward(net.params["inject.U"], x0)
        self.evaluations = 0

    def __call__(self, z):
        self.evaluations += 1
        out, _ = L.run_sequence(
            self.net.config.tied, self.params, z, self.net.layout.inject_at, self.injection,
            keep_caches=False,
        )
        return out

    def linearize(self, z) -> "StepLinearization":
        out, caches = L.run_sequence(
            self.net.config.tied, self.params, z, self.net.layout.inject_at, self.injection
        )
        return StepLinearization(self, caches, out)


class StepLinearization:
    """Vector-Jacobian products of a :class:`TiedStepMap` at a fixed ``z``."""

    def __init__(self, fmap: TiedStepMap, caches, value):
        self.fmap = fmap
        self.caches = caches
        self.value = value

    def vjp_z(self, u):
        f = self.fmap
        dz, _, _ = L.run_sequence_backward(
            f.net.config.tied, f.params, u, self.caches, f.net.layout.inject_at,
            need_param_grads=False,
        )
        return dz

    def vjp_params(self, u):
        """Gradients wrt the tied weights and injection map, plus dx0."""
        f = self.fmap
        net = f.net
        _, layer_grads, d_inj = L.run_sequence_backward(
            net.config.tied, f.params, u, self.caches, net.layout.inject_at
        )
        grads = {}
        _accumulate(grads, net, 0, layer_grads)
        dU, dx0 = _inject_backward(net.params["inject.U"], f.x0, d_inj)
        grads["inject.U"] = dU
        return grads, dx0


def param_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()
