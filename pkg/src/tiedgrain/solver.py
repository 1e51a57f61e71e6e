"""Equilibrium (DEQ) mode: fixed-point solvers and implicit gradients.

The equilibrium ``z* = f(z*; x)`` is found from ``z_0 = 0`` by plain
iteration or Anderson acceleration. Gradients at ``z*`` solve
``u = g + J^T u`` (``J = df/dz`` at ``z*``) with vector-Jacobian products
only, so memory does not grow with the number of iterations.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, NonConvergenceError
from . import layers as L
from .model import (
    Network,
    NetworkConfig,
    TiedStepMap,
    build_network,
    head_backward,
    stem_backward,
    tied_block_backward,
    tied_block_forward,
)

log = logging.getLogger(__name__)

EPS = 1e-12
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 30


@dataclass
class FixedPointResult:
    z_star: np.ndarray
    residual_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    fallback_steps: int = 0


def relative_residual(fz, z) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.linalg.norm(fz - z) / (np.linalg.norm(z) + EPS))


def _evaluate(f, z, t):
    with np.errstate(over="ignore", invalid="ignore"):
        fz = f(z)
    if not np.all(np.isfinite(fz)):
        raise DivergenceError("non-finite iterate in fixed-point solve", t)
    return fz


def fixed_point_iterate(f, z0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> FixedPointResult:
    """Plain iteration ``z <- f(z)`` until the relative residual drops below ``tol``."""
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    z = z0
    history = []
    for t in range(1, max_iter + 1):
        fz = _evaluate(f, z, t)
        history.append(relative_residual(fz, z))
        z = fz
        if history[-1] < tol:
            return FixedPointResult(z, history, t, True)
    return FixedPointResult(z, history, max_iter, False)


def anderson_iterate(
    f, z0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, m=5, beta=1.0
) -> FixedPointResult:
    """Anderson-accelerated fixed-point iteration.

    ``m`` is the number of stored (iterate, image) pairs, so ``m - 1``
    differences enter the least-squares mix; ``m=1, beta=1`` is plain
    iteration. Rank-deficient steps fall back to a plain damped step.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    if m < 1 or m > max_iter:
        raise ValueError(f"history m must lie in [1, max_iter], got {m}")
    shape = z0.shape
    z = z0.reshape(-1)
    xs, gs = deque(maxlen=m), deque(maxlen=m)
    history = []
    fallbacks = 0
    g = z
    for t in range(1, max_iter + 1):
        g = _evaluate(f, z.reshape(shape), t).reshape(-1)
        history.append(relative_residual(g, z))
        if history[-1] < tol:
            return FixedPointResult(g.reshape(shape), history, t, True, fallbacks)
        xs.append(z)
        gs.append(g)
        resid = g - z
        if len(xs) == 1:
            z = z + beta * resid
            continue
        X = np.stack(xs, axis=1)
        G = np.stack(gs, axis=1)
        F = G - X
        dX, dF = np.diff(X, axis=1), np.diff(F, axis=1)
        gamma, _, rank, _ = np.linalg.lstsq(dF, resid, rcond=None)
        if rank < dF.shape[1]:
            log.debug("anderson: rank-deficient history at iteration %d, plain step", t)
            fallbacks += 1
            z = z + beta * resid
            continue
        z = z + beta * resid - (dX + beta * dF) @ gamma
    return FixedPointResult(g.reshape(shape), history, max_iter, False, fallbacks)


def iterate_to_fixed_point(
    net: Network, x, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER
) -> FixedPointResult:
    """Equilibrium of the tied step for tied-block input ``x`` (z_0 = 0)."""
    fmap = TiedStepMap(net, x)
    return fixed_point_iterate(fmap, np.zeros_like(x), tol, max_iter)


def anderson_fixed_point(
    net: Network, x, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, m=5, beta=1.0
) -> FixedPointResult:
    fmap = TiedStepMap(net, x)
    return anderson_iterate(fmap, np.zeros_like(x), tol, max_iter, m, beta)


def solve_adjoint(vjp_z, g, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, strict=True):
    """Solve ``u = g + J^T u`` by iteration; returns ``(u, iterations)``.

    With ``strict=False`` an unconverged solve returns its last iterate
    instead of raising (overflow still raises).
    """
    u = g
    for t in range(1, max_iter + 1):
        u_next = g + vjp_z(u)
        if not np.all(np.isfinite(u_next)):
            raise NonConvergenceError(
                f"adjoint iteration overflowed at step {t}; "
                "the map is not contractive at z* (try a smaller model or looser tol)"
            )
        change = np.linalg.norm(u_next - u) / (np.linalg.norm(u_next) + EPS)
        u = u_next
        if change < tol:
            return u, t
    if not strict:
        log.debug("adjoint solve stopped at max_iter=%d (change %.3g)", max_iter, change)
        return u, max_iter
    raise NonConvergenceError(
        f"adjoint iteration did not reach tol {tol} in {max_iter} steps "
        "(try a smaller model or looser tol)"
    )


def implicit_vjp_backward(
    net: Network, x, z_star, loss_grad, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, strict=True
):
    """Implicit-function-theorem gradients at the equilibrium.

    Returns ``(grads, dx)`` where ``grads`` covers the tied weights and the
    injection map and ``dx`` is dLoss/d(tied-block input).
    """
    fmap = TiedStepMap(net, x)
    lin = fmap.linearize(z_star)
    u, _ = solve_adjoint(lin.vjp_z, loss_grad, tol, max_iter, strict)
    return lin.vjp_params(u)


def unrolled_backward_reference(net: Network, x, T: int, loss_grad, start="zeros"):
    """Exact gradients of T explicit applications of the tied step.

    Oracle for :func:`implicit_vjp_backward`; with ``start="input"`` and
    ``T == K`` this is the ordinary weight-tied backward.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    z, tr = tied_block_forward(net, x, trace=True, steps=T, start=start)
    grads, dx = tied_block_backward(net, loss_grad, tr)
    return grads, dx


def linear_map_network(A, U=None) -> Network:
    """Network whose tied step is exactly ``f(z; x) = A z + U x`` (U defaults to I)."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    net = build_network(
        NetworkConfig(input_shape=(n,), tied=[{"kind": "dense", "width": n}], input_injection=True)
    )
    params = dict(net.params)
    params["tied.0.W"] = A.copy()
    params["tied.0.b"] = np.zeros(n)
    params["inject.U"] = np.eye(n) if U is None else np.asarray(U, dtype=np.float64).copy()
    return net.with_params(params)


# -- whole-network equilibrium mode ------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    method: str = "anderson"
    m: int = 5
    beta: float = 1.0
    backward_tol: float = DEFAULT_TOL
    backward_max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.method not in ("anderson", "naive"):
            raise ValueError(f"solver method must be 'anderson' or 'naive', got {self.method!r}")


@dataclass
class DEQTrace:
    stem_caches: list
    x0: np.ndarray
    result: FixedPointResult
    head_caches: list


def solve_equilibrium(net: Network, x0, solver: SolverConfig) -> FixedPointResult:
    if solver.method == "anderson":
        return anderson_fixed_point(net, x0, solver.tol, solver.max_iter, solver.m, solver.beta)
    return iterate_to_fixed_point(net, x0, solver.tol, solver.max_iter)


def deq_forward(net: Network, x, solver: SolverConfig = SolverConfig(), trace=False):
    """``stem -> equilibrium of the tied step -> head``; returns ``(out, DEQTrace or None)``.

    An unconverged solve uses its last iterate.
    """
    x = np.asarray(x, dtype=np.float64)
    h, stem_c = L.run_sequence(net.config.stem, net.section_params("stem"), x, keep_caches=trace)
    res = solve_equilibrium(net, h, solver)
    if not res.converged:
        log.debug("equilibrium solve unconverged after %d iterations", res.iterations)
    out, head_c = L.run_sequence(
        net.config.head, net.section_params("head"), res.z_star, keep_caches=trace
    )
    return out, (DEQTrace(stem_c, h, res, head_c) if trace else None)


def deq_backward(net: Network, loss_grad, tr: DEQTrace, solver: SolverConfig = SolverConfig(), strict=False):
    """Gradients of every parameter: head backprop, implicit tied backward, stem backprop.

    Returns ``(grads, adjoint_iterations)``.
    """
    grads, dz = head_backward(net, loss_grad, tr.head_caches)
    lin = TiedStepMap(net, tr.x0).linearize(tr.result.z_star)
    u, iters = solve_adjoint(lin.vjp_z, dz, solver.backward_tol, solver.backward_max_iter, strict)
    tg, dx0 = lin.vjp_params(u)
    grads.update(tg)
    sg, _ = stem_backward(net, dx0, tr.stem_caches)
    grads.update(sg)
    for name, p in net.params.items():
        if name not in grads:
            grads[name] = np.zeros_like(p)
    return grads, iters
