
import numpy as np
import pytest

from tiedgrain.analysis import (
    UndefinedSimilarityError,
    cka_heatmap,
    gram,
    heatmap_from_activations,
    linear_cka,
    linear_hsic,
    linear_probe,
    probe_tied_layers,
)
from tiedgrain.errors import ConfigError, DimensionError
from tiedgrain.model import NetworkConfig, build_network, param_checksum


def small_net(K=3, mask_mode="dense"):
    return build_network(
        NetworkConfig(
            input_shape=(2,),
            stem=[{"kind": "dense", "width": 8}, {"kind": "relu"}],
            tied=[{"kind": "dense", "width": 8}, {"kind": "tanh"}],
            head=[{"kind": "classifier_head", "width": 3}],
            K=K,
            mask_mode=mask_mode,
            density=0.5,
        ),
        param_seed=3,
    )


def test_hsic_hand_evaluated_two_examples():
    X = np.eye(2)
    K = gram(X)
    # H = [[.5,-.5],[-.5,.5]]; H K H = H (K = I, H idempotent); sum(H*H) = 1; (m-1)^2 = 1
    assert linear_hsic(K, K) == pytest.approx(1.0, abs=1e-15)


def test_hsic_constant_features_vanish(np_rng):
    X = np.tile(np_rng.normal(size=(1, 5)), (6, 1))
    L = gram(np_rng.normal(size=(6, 3)))
    assert abs(linear_hsic(gram(X), L)) < 1e-12


def test_hsic_symmetric_and_bilinear(np_rng):
    K = gram(np_rng.normal(size=(10, 4)))
    L = gram(np_rng.normal(size=(10, 7)))
    assert linear_hsic(K, L) == pytest.approx(linear_hsic(L, K), rel=1e-13)
    assert linear_hsic(3.5 * K, L) == pytest.approx(3.5 * linear_hsic(K, L), rel=1e-13)


def test_hsic_size_mismatch():
    with pytest.raises(DimensionError):
        linear_hsic(np.eye(3), np.eye(4))


def test_cka_invariances(np_rng):
    for _ in range(20):
        X = np_rng.normal(size=(12, 5))
        Y = np_rng.normal(size=(12, 6))
        q, _ = np.linalg.qr(np_rng.normal(size=(6, 6)))
        base = linear_cka(X, Y)
        assert 0.0 <= base <= 1.0
        assert abs(linear_cka(X, X) - 1.0) < 1e-10
        assert abs(linear_cka(X, Y @ q) - base) < 1e-10
        assert abs(linear_cka(X, -2.7 * Y) - base) < 1e-10
        assert abs(linear_cka(X[:, np_rng.permutation(5)], Y) - base) < 1e-10


def test_cka_noise_lowers_similarity():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(8, 4))
    Y = X + 10.0 * rng.normal(size=(8, 4))
    assert linear_cka(X, Y) < 0.99


def test_cka_constant_raises(np_rng):
    with pytest.raises(UndefinedSimilarityError):
        linear_cka(np.ones((5, 3)), np_rng.normal(size=(5, 2)))


def test_cka_needs_three_examples(np_rng):
    with pytest.raises(DimensionError):
        linear_cka(np_rng.normal(size=(2, 3)), np_rng.normal(size=(2, 3)))


def test_heatmap_shape_symmetry_diagonal(np_rng):
    net = small_net(K=4)
    hm = cka_heatmap(net, np_rng.normal(size=(40, 2)))
    assert hm.labels == ["stem", "tied1", "tied2", "tied3", "tied4", "head"]
    assert hm.values.shape == (6, 6)
    assert np.allclose(hm.values, hm.values.T, atol=0)
    assert np.all(np.abs(np.diag(hm.values) - 1.0) < 1e-10)
    assert np.all((hm.values >= 0) & (hm.values <= 1))


def test_heatmap_layer_selection(np_rng):
    hm = cka_heatmap(small_net(K=3), np_rng.normal(size=(40, 2)), layers=["tied1", "tied3"])
    assert hm.labels == ["tied1", "tied3"]
    with pytest.raises(ConfigError):
        cka_heatmap(small_net(K=3), np_rng.normal(size=(40, 2)), layers=["tied9"])


def test_heatmap_records_missing_cells(np_rng):
    acts = [np_rng.normal(size=(40, 3)), np.ones((40, 3)), np_rng.normal(size=(40, 2))]
    hm = heatmap_from_activations(acts, ["a", "b", "c"])
    assert np.isnan(hm.values[1]).all() and np.isnan(hm.values[:, 1]).all()
    assert not np.isnan(hm.values[0, 2])


def test_heatmap_warns_small_batch(np_rng):
    with pytest.warns(UserWarning, match="at least 32"):
        cka_heatmap(small_net(), np_rng.normal(size=(10, 2)))


def test_heatmap_threaded_matches_serial(np_rng, monkeypatch):
    net = small_net(K=4)
    x = np_rng.normal(size=(40, 2))
    serial = cka_heatmap(net, x).values
    monkeypatch.setenv("TIEDGRAIN_THREADS", "4")
    assert np.array_equal(cka_heatmap(net, x).values, serial)


def blobs(rng, n, centers, noise):
    centers = np.asarray(centers, dtype=float)
    y = np.arange(n) % len(centers)
    return centers[y] + noise * rng.normal(size=(n, centers.shape[1])), y


def test_probe_separable_blobs():
    rng = np.random.default_rng(5)
    x, y = blobs(rng, 400, [[-3.0, 0.0], [3.0, 0.0]], 0.5)
    # closed-form separator x0 = 0 already gets everything right
    assert np.mean((x[:, 0] > 0) == (y == 1)) == 1.0
    acc = linear_probe(x[:300], y[:300], x[300:], y[300:])
    assert acc >= 0.99


def test_probe_shuffled_labels_near_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2000, 16))
        y = rng.integers(0, 10, size=2000)
        accs.append(linear_probe(x[:1000], y[:1000], x[1000:], y[1000:]))
    assert all(0.05 <= a <= 0.2 for a in accs), accs


def test_probe_single_class_rejected(np_rng):
    with pytest.raises(ConfigError):
        linear_probe(np_rng.normal(size=(10, 2)), np.zeros(10, int), np_rng.normal(size=(4, 2)), np.zeros(4, int))


def test_probe_layers_leaves_backbone_unchanged(np_rng):
    net = small_net(K=3, mask_mode="multi_mask")
    before = param_checksum(net.params)
    x, y = blobs(np_rng, 90, [[-2, 0], [2, 0], [0, 3]], 0.3)
    res = probe_tied_layers(net, x[:60], y[:60], x[60:], y[60:], epochs=20)
    assert len(res.accuracies) == 3 and res.layers == [1, 2, 3]
    assert all(0.0 <= a <= 1.0 for a in res.accuracies)
    assert param_checksum(net.params) == before


def test_weight_tied_layers_more_similar_than_untied():
    from tiedgrain.data_io import DatasetSpec, load_dataset
    from tiedgrain.training import OptimizerState, ScheduleConfig, TrainConfig, default_total_steps, train_loop

    means = {True: [], False: []}
    for seed in range(6):
        data = load_dataset(DatasetSpec("synthetic_spiral", n=1500, classes=3, noise=0.3, seed=seed))
        for shared in (True, False):
            cfg = NetworkConfig(
                input_shape=(2,),
                stem=[{"kind": "dense", "width": 32}, {"kind": "relu"}],
                tied=[{"kind": "dense", "width": 32}, {"kind": "relu"}],
                head=[{"kind": "classifier_head", "width": 3}],
                K=8,
                shared=shared,
            )
            net = build_network(cfg, seed)
            tc = TrainConfig(epochs=20, batch_size=128, seed=seed, eval_every=20)
            sched = ScheduleConfig("cosine", 0.01, default_total_steps(tc, len(data.x_train), net))
            res = train_loop(net, data, tc, OptimizerState("adam", lr=0.01), sched)
            means[shared].append(cka_heatmap(res.net, data.x_test[:256]).tied_mean_offdiag())
    assert np.mean(means[True]) > np.mean(means[False])


def test_training_changes_heatmap(np_rng):
    from tiedgrain.data_io import DatasetSpec, load_dataset
    from tiedgrain.training import OptimizerState, TrainConfig, train_loop

    net = small_net(K=4)
    data = load_dataset(DatasetSpec("synthetic_spiral", n=300, classes=3))
    before = cka_heatmap(net, data.x_test).values
    trained = train_loop(net, data, TrainConfig(epochs=5, batch_size=32), OptimizerState("adam", lr=0.01)).net
    after = cka_heatmap(trained, data.x_test).values
    assert np.nanmax(np.abs(after - before)) > 1e-3
