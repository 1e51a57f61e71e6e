"""Optimizers, learning-rate schedules, augmentation and the training loop.

Every source of randomness is a SplitMix64 stream derived from the run
seed, so a run is a pure function of its config and seeds.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .model import Network, backward, count_flops_forward, forward, softmax_cross_entropy
from .model import tied_step_flops
from .solver import SolverConfig, deq_backward, deq_forward
from .tensor_core import Rng, derive_stream_seed

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adam", "adamw")
SCHEDULES = ("cosine", "multistep", "constant")
AUGMENT_STREAM = 0xA06
SHUFFLE_STREAM = 0x5F1


# -- optimizers ------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")

    def hyper(self) -> dict:
        """Scalar fields, for checkpoint metadata."""
        keys = ("kind", "lr", "momentum", "beta1", "beta2", "eps", "weight_decay", "step")
        return {k: getattr(self, k) for k in keys}


def _check_grads(state, params, grads):
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at optimizer step {state.step + 1}")


def adam_step(state: OptimizerState, params: dict, grads: dict, lr=None):
    """One Adam/AdamW update with bias correction. Returns ``(state, params)``.

    Plain Adam folds weight decay into the gradient; AdamW applies it
    directly to the weights.
    """
    _check_grads(state, params, grads)
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new = dict(params)
    for name, g in grads.items():
        w = params[name]
        if state.kind == "adam" and state.weight_decay:
            g = g + state.weight_decay * w
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (np.sqrt(vhat) + state.eps)
        if state.kind == "adamw" and state.weight_decay:
            w = w - lr * state.weight_decay * params[name]
        new[name] = w
    state.step = t
    return state, new


def sgd_step(state: OptimizerState, params: dict, grads: dict, lr=None):
    """``v <- mu v + g``; ``w <- w - lr (v + wd w)``."""
    _check_grads(state, params, grads)
    lr = state.lr if lr is None else lr
    new = dict(params)
    for name, g in grads.items():
        v = state.momentum * state.m.get(name, 0.0) + g
        state.m[name] = v
        new[name] = params[name] - lr * (v + state.weight_decay * params[name])
    state.step += 1
    return state, new


def optimizer_step(state: OptimizerState, params, grads, lr=None):
    if state.kind == "sgd_momentum":
        return sgd_step(state, params, grads, lr)
    return adam_step(state, params, grads, lr)


# -- schedules -------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    max_lr: float = 1e-3
    total_steps: int = 1
    milestones: tuple = ()
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULES}")
        if self.max_lr <= 0:
            raise ConfigError(f"max_lr must be positive, got {self.max_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")


def lr_at(schedule: ScheduleConfig, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "cosine":
        return 0.5 * schedule.max_lr * (1.0 + math.cos(math.pi * step / schedule.total_steps))
    if schedule.kind == "multistep":
        passed = sum(1 for m in schedule.milestones if m <= step)
        return schedule.max_lr * schedule.gamma**passed
    return schedule.max_lr


# -- augmentation ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentFlags:
    normalize: bool = False
    crop: bool = False
    flip: bool = False
    pad: int = 4
    flip_p: float = 0.5
    mean: tuple | None = None
    std: tuple | None = None


def normalize(batch, mean, std):
    """Per-channel (axis 1) standardisation."""
    shape = (1, -1) + (1,) * (batch.ndim - 2)
    return (batch - np.reshape(mean, shape)) / np.reshape(std, shape)


def pad_crop(img, pad, dy, dx):
    """Zero-pad a (C, H, W) image by ``pad`` and crop H x W at offset (dy, dx)."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy : dy + h, dx : dx + w]


def augment_batch(batch, rng: Rng, flags: AugmentFlags):
    """Normalize, random pad-crop and random horizontal flip of an (N, C, H, W) batch.

    Per sample the draws are: crop row offset, crop column offset, flip
    coin, each drawn only when the matching flag is on.
    """
    out = np.asarray(batch, dtype=np.float64)
    if flags.normalize:
        if flags.mean is None or flags.std is None:
            raise ConfigError("normalization needs dataset mean and std")
        out = normalize(out, flags.mean, flags.std)
    if not (flags.crop or flags.flip):
        return out
    if out.ndim != 4:
        raise ConfigError(f"crop/flip need image batches (N, C, H, W), got {out.shape}")
    out = out.copy()
    span = 2 * flags.pad + 1
    for i in range(out.shape[0]):
        if flags.crop:
            dy, dx = rng.randbelow(span), rng.randbelow(span)
            out[i] = pad_crop(out[i], flags.pad, dy, dx)
        if flags.flip and rng.uniform() < flags.flip_p:
            out[i] = out[i][:, :, ::-1]
    return out


# -- training loop ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int | None = None
    flop_budget: int | None = None
    batch_size: int = 128
    seed: int = 0
    augment: AugmentFlags = AugmentFlags()
    eval_every: int = 1
    mode: str = "tied"
    solver: SolverConfig = SolverConfig()
    record_wall: bool = False
    max_epochs: int = 10_000

    def __post_init__(self):
        if (self.epochs is None) == (self.flop_budget is None):
            raise ConfigError("set exactly one of epochs and flop_budget")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.flop_budget is not None and self.flop_budget <= 0:
            raise ConfigError(f"flop_budget must be positive, got {self.flop_budget}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in ("tied", "deq"):
            raise ConfigError(f"training mode must be 'tied' or 'deq', got {self.mode!r}")


@dataclass
class MetricsRow:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    test_acc: float
    cum_flops: int
    wall_ms: int = 0


@dataclass
class TrainResult:
    net: Network
    rows: list
    optimizer: OptimizerState

    def __iter__(self):
        return iter((self.net, self.rows))


class TrainingAborted(NumericError):
    """Raised on a non-finite loss; ``rows`` ends with the diagnostic row."""

    def __init__(self, message, rows):
        self.rows = rows
        super().__init__(message)


def batch_flops(net: Network, n: int) -> int:
    """Weight-tied training cost of one batch: forward plus a 2x backward."""
    return 3 * count_flops_forward(net, n)


def deq_batch_flops(net: Network, n: int, forward_evals: int, adjoint_iters: int) -> int:
    """Equilibrium training cost: each solver evaluation is one tied step,
    each adjoint iteration a VJP costed at twice a step."""
    _, parts = count_flops_forward(net, n, breakdown=True)
    base = parts["stem"] + parts["inject"] + parts["head"]
    step = tied_step_flops(net, 0) * n
    # linearize + parameter VJP at z* add one forward and one backward step
    return 3 * base + step * (forward_evals + 1) + 2 * step * (adjoint_iters + 1)


def predict(net: Network, x, mode="tied", solver: SolverConfig = SolverConfig(), chunk=1024):
    outs = []
    for i in range(0, len(x), chunk):
        xb = x[i : i + chunk]
        out = deq_forward(net, xb, solver)[0] if mode == "deq" else forward(net, xb)[0]
        outs.append(out)
    return np.concatenate(outs)


def evaluate(net: Network, x, y, mode="tied", solver=SolverConfig(), flags=None) -> float:
    if len(x) == 0:
        return float("nan")
    if flags is not None and flags.normalize:
        x = normalize(np.asarray(x, dtype=np.float64), flags.mean, flags.std)
    return float(np.mean(np.argmax(predict(net, x, mode, solver), axis=1) == y))


def _train_batch(net, xb, yb, cfg: TrainConfig):
    if cfg.mode == "deq":
        out, tr = deq_forward(net, xb, cfg.solver, trace=True)
        loss, dout = softmax_cross_entropy(out, yb)
        if not math.isfinite(loss):
            return loss, out, None, 0
        grads, adj = deq_backward(net, dout, tr, cfg.solver)
        flops = deq_batch_flops(net, len(xb), tr.result.iterations, adj)
        return loss, out, grads, flops
    out, tr = forward(net, xb, trace=True)
    loss, dout = softmax_cross_entropy(out, yb)
    if not math.isfinite(loss):
        return loss, out, None, 0
    return loss, out, backward(net, dout, tr), batch_flops(net, len(xb))


def _worst_batch_flops(net, n, cfg):
    if cfg.mode == "deq":
        return deq_batch_flops(net, n, cfg.solver.max_iter, cfg.solver.backward_max_iter)
    return batch_flops(net, n)


def default_total_steps(cfg: TrainConfig, n_train: int, net: Network) -> int:
    per_epoch = math.ceil(n_train / cfg.batch_size)
    if cfg.epochs is not None:
        return max(1, cfg.epochs * per_epoch)
    return max(1, cfg.flop_budget // _worst_batch_flops(net, cfg.batch_size, cfg))


def train_loop(
    net: Network,
    data,
    cfg: TrainConfig,
    opt: OptimizerState,
    schedule: ScheduleConfig | None = None,
) -> TrainResult:
    """Minibatch training until the epoch count or FLOP budget runs out.

    ``data`` needs ``x_train, y_train, x_test, y_test``. A batch is only
    started if its cost fits in the remaining budget (worst-case solver
    iterations in equilibrium mode), so the run ends within one batch of
    the budget. A metrics row is emitted every ``eval_every`` epochs and
    at the end.
    """
    x_train, y_train = data.x_train, data.y_train
    n = len(x_train)
    if n == 0:
        raise ConfigError("training set is empty")
    shuffle_rng = Rng(derive_stream_seed(cfg.seed, SHUFFLE_STREAM))
    aug_rng = Rng(derive_stream_seed(cfg.seed, AUGMENT_STREAM))
    image = x_train.ndim == 4
    t0 = time.perf_counter()
    rows = []
    cum = 0
    step = 0
    epoch = 0
    out_of_budget = False

    def emit(ep, loss_sum, correct, seen):
        wall = int((time.perf_counter() - t0) * 1000) if cfg.record_wall else 0
        test_acc = evaluate(net, data.x_test, data.y_test, cfg.mode, cfg.solver, cfg.augment)
        rows.append(
            MetricsRow(ep, step, loss_sum / max(seen, 1), correct / max(seen, 1), test_acc, cum, wall)
        )

    loss_sum = correct = seen = 0.0
    while not out_of_budget:
        if cfg.epochs is not None and epoch >= cfg.epochs:
            break
        if epoch >= cfg.max_epochs:
            log.warning("stopping at max_epochs=%d before the FLOP budget ran out", cfg.max_epochs)
            break
        epoch += 1
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if cfg.flop_budget is not None:
                if cum + _worst_batch_flops(net, len(idx), cfg) > cfg.flop_budget:
                    out_of_budget = True
                    break
            xb = x_train[idx]
            if image or cfg.augment.normalize:
                xb = augment_batch(xb, aug_rng, cfg.augment)
            yb = y_train[idx]
            loss, out, grads, flops = _train_batch(net, xb, yb, cfg)
            if grads is None:
                wall = int((time.perf_counter() - t0) * 1000) if cfg.record_wall else 0
                rows.append(MetricsRow(epoch, step, loss, float("nan"), float("nan"), cum, wall))
                raise TrainingAborted(f"non-finite loss at step {step + 1} (epoch {epoch})", rows)
            lr = lr_at(schedule, min(step, schedule.total_steps)) if schedule else None
            opt, params = optimizer_step(opt, net.params, grads, lr)
            net = net.with_params(params)
            step += 1
            cum += flops
            loss_sum += loss * len(idx)
            correct += float(np.sum(np.argmax(out, axis=1) == yb))
            seen += len(idx)
        if out_of_budget and seen == 0 and rows:
            break
        if out_of_budget or epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            emit(epoch, loss_sum, correct, seen)
            loss_sum = correct = seen = 0.0
    return TrainResult(net, rows, opt)
