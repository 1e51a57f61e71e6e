import math

import numpy as np
import pytest

from tiedgrain.data_io import DatasetSpec, load_dataset
from tiedgrain.errors import ConfigError, NumericError
from tiedgrain.model import NetworkConfig, build_network, count_flops_forward, param_checksum
from tiedgrain.solver import SolverConfig
from tiedgrain.tensor_core import Rng
from tiedgrain.training import (
    AugmentFlags,
    OptimizerState,
    ScheduleConfig,
    TrainConfig,
    TrainingAborted,
    adam_step,
    augment_batch,
    batch_flops,
    lr_at,
    pad_crop,
    sgd_step,
    train_loop,
)


def one(v):
    return {"w": np.array([float(v)])}


def test_adam_first_step_hand_value():
    st = OptimizerState("adam", lr=0.1)
    st, p = adam_step(st, one(1.0), one(1.0))
    # bias-corrected step is lr * g / (|g| + eps)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert st.step == 1


def test_adam_zero_grad_no_change():
    st = OptimizerState("adam", lr=0.1)
    _, p = adam_step(st, one(2.0), one(0.0))
    assert p["w"][0] == 2.0


def test_adamw_decouples_decay():
    st = OptimizerState("adamw", lr=0.1, weight_decay=0.5)
    _, p = adam_step(st, one(1.0), one(0.0))
    assert p["w"][0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_adam_rejects_nonfinite():
    st = OptimizerState("adam")
    with pytest.raises(NumericError, match="step 1"):
        adam_step(st, one(1.0), one(float("nan")))


def test_sgd_plain_and_momentum():
    st = OptimizerState("sgd_momentum", lr=0.1, momentum=0.0)
    _, p = sgd_step(st, one(1.0), one(0.5))
    assert p["w"][0] == pytest.approx(0.95)
    st = OptimizerState("sgd_momentum", lr=0.1, momentum=0.9)
    st, p = sgd_step(st, one(1.0), one(1.0))
    st, p = sgd_step(st, p, one(1.0))
    assert p["w"][0] == pytest.approx(0.71)


def test_sgd_weight_decay_only():
    st = OptimizerState("sgd_momentum", lr=0.1, momentum=0.9, weight_decay=0.01)
    _, p = sgd_step(st, one(2.0), one(0.0))
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)


def test_schedules():
    cos = ScheduleConfig("cosine", 0.2, 100)
    assert lr_at(cos, 0) == 0.2
    assert lr_at(cos, 50) == pytest.approx(0.1)
    ms = ScheduleConfig("multistep", 0.05, 100, milestones=(30, 60), gamma=0.1)
    assert lr_at(ms, 45) == pytest.approx(0.005)
    assert lr_at(ms, 60) == pytest.approx(0.0005)
    with pytest.raises(ConfigError):
        lr_at(cos, 101)
    with pytest.raises(ConfigError):
        ScheduleConfig("multistep", 0.1, 10, milestones=(5, 5))


def test_flip_and_crop_identities(np_rng):
    x = np_rng.normal(size=(3, 2, 6, 6))
    flags = AugmentFlags(flip=True, flip_p=1.0)
    once = augment_batch(x, Rng(0), flags)
    assert np.array_equal(once, x[..., ::-1])
    assert np.array_equal(augment_batch(once, Rng(0), flags), x)
    assert np.array_equal(pad_crop(x[0], 4, 4, 4), x[0])


def test_normalize_means_to_zero():
    mean, std = (0.5, 0.2), (0.1, 0.3)
    x = np.empty((1, 2, 3, 3))
    x[:, 0], x[:, 1] = 0.5, 0.2
    out = augment_batch(x, Rng(0), AugmentFlags(normalize=True, mean=mean, std=std))
    assert not out.any()


def test_augment_deterministic(np_rng):
    x = np_rng.normal(size=(4, 1, 5, 5))
    flags = AugmentFlags(crop=True, flip=True)
    assert np.array_equal(augment_batch(x, Rng(9), flags), augment_batch(x, Rng(9), flags))


def test_train_config_budget_kind():
    with pytest.raises(ConfigError):
        TrainConfig()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, flop_budget=10)


def blob_setup(mask_mode="dense", density=1.0, injection=False):
    data = load_dataset(DatasetSpec("synthetic_blobs", n=400, classes=2, noise=0.5, seed=1))
    net = build_network(
        NetworkConfig(
            input_shape=(2,),
            stem=[{"kind": "dense", "width": 16}, {"kind": "relu"}],
            tied=[{"kind": "dense", "width": 16}, {"kind": "relu"}],
            head=[{"kind": "classifier_head", "width": 2}],
            K=2,
            mask_mode=mask_mode,
            density=density,
            input_injection=injection,
        ),
        param_seed=4,
    )
    return net, data


def test_blobs_reach_high_train_accuracy():
    net, data = blob_setup()
    res = train_loop(net, data, TrainConfig(epochs=20, batch_size=32), OptimizerState("adam", lr=0.01))
    assert res.rows[-1].train_acc >= 0.99
    assert len(res.rows) == 20
    assert all(a.cum_flops <= b.cum_flops for a, b in zip(res.rows, res.rows[1:]))


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        net, data = blob_setup("multi_mask", 0.5)
        res = train_loop(net, data, TrainConfig(epochs=3, batch_size=50, seed=3),
                         OptimizerState("adam", lr=0.01), ScheduleConfig("cosine", 0.01, 24))
        runs.append((param_checksum(res.net.params), [r.__dict__ for r in res.rows]))
    assert runs[0] == runs[1]


def test_flop_budget_stopping_rule():
    net, data = blob_setup()
    cost = batch_flops(net, 32)
    budget = 17 * cost + cost // 2
    res = train_loop(net, data, TrainConfig(flop_budget=budget, batch_size=32), OptimizerState())
    final = res.rows[-1].cum_flops
    assert budget - cost <= final <= budget


def test_flops_are_analytic_sum():
    net, data = blob_setup()
    res = train_loop(net, data, TrainConfig(epochs=1, batch_size=64), OptimizerState())
    n = len(data.x_train)
    expected = sum(3 * count_flops_forward(net, min(64, n - s)) for s in range(0, n, 64))
    assert res.rows[-1].cum_flops == expected


def test_deq_training_runs():
    net, data = blob_setup(injection=True)
    net = net.with_params({k: v * (0.5 if k.startswith("tied") else 1.0) for k, v in net.params.items()})
    res = train_loop(net, data, TrainConfig(epochs=3, batch_size=64, mode="deq",
                                            solver=SolverConfig(max_iter=20)),
                     OptimizerState("adam", lr=0.01))
    assert res.rows[-1].test_acc > 0.9


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts_with_row():
    net, data = blob_setup()
    params = dict(net.params)
    params["head.0.W"] = np.full_like(params["head.0.W"], np.inf)
    with pytest.raises(TrainingAborted) as info:
        train_loop(net.with_params(params), data, TrainConfig(epochs=1), OptimizerState())
    assert math.isnan(info.value.rows[-1].train_loss)
