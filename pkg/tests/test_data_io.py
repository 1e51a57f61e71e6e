import numpy as np
import pytest

from tiedgrain.analysis import CKAHeatmap
from tiedgrain.data_io import (
    Checkpoint,
    DatasetSpec,
    generate_synthetic,
    load_checkpoint,
    load_cifar10_binary,
    load_dataset,
    load_idx,
    read_heatmap_csv,
    save_checkpoint,
    write_heatmap,
)
from tiedgrain.errors import ConfigError, FormatError
from tiedgrain.model import NetworkConfig, build_network
from tiedgrain.training import OptimizerState, adam_step


def test_cifar_single_zero_record(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3073))
    x, y = load_cifar10_binary(p)
    assert x.shape == (1, 3, 32, 32) and not x.any() and y.tolist() == [0]


def test_cifar_wrong_size(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(3072))
    with pytest.raises(FormatError, match="3072"):
        load_cifar10_binary(p)


def test_cifar_bad_label(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(bytes([17]) + bytes(3072))
    with pytest.raises(FormatError, match="record 0"):
        load_cifar10_binary(p)


def test_cifar_pixel_layout(tmp_path):
    rec = bytearray(3073)
    rec[0] = 3
    rec[1 + 1024 + 32 * 2 + 5] = 255  # green channel, row 2, col 5
    p = tmp_path / "b.bin"
    p.write_bytes(bytes(rec))
    x, y = load_cifar10_binary(p)
    assert y[0] == 3 and x[0, 1, 2, 5] == 1.0 and x.sum() == 1.0


def test_idx_roundtrip(tmp_path):
    data = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    p = tmp_path / "a.idx"
    p.write_bytes(bytes([0, 0, 8, 3]) + b"".join(int(d).to_bytes(4, "big") for d in data.shape) + data.tobytes())
    assert np.array_equal(load_idx(p), data)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(FormatError):
        load_idx(p)


def test_blobs_zero_noise_at_centers():
    x, y = generate_synthetic(DatasetSpec("synthetic_blobs", n=30, classes=3, noise=0.0))
    for c in range(3):
        pts = x[y == c]
        assert np.all(pts == pts[0])


def test_synthetic_deterministic_and_balanced():
    spec = DatasetSpec("synthetic_spiral", n=300, classes=3, seed=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.bincount(a[1]).tolist() == [100, 100, 100]


def test_synthetic_invalid():
    with pytest.raises(ConfigError):
        generate_synthetic(DatasetSpec("synthetic_spiral", n=5, classes=3))


def test_dataset_missing_path():
    with pytest.raises(ConfigError, match="data.path"):
        load_dataset(DatasetSpec("cifar10_bin", path="/nonexistent/cifar"))


def test_dataset_split_sizes():
    d = load_dataset(DatasetSpec("synthetic_blobs", n=100, classes=2, test_fraction=0.25))
    assert len(d.x_train) == 75 and len(d.x_test) == 25


def mm_net(K=4):
    return build_network(
        NetworkConfig(
            input_shape=(3,),
            tied=[{"kind": "dense", "width": 3}, {"kind": "tanh"}],
            head=[{"kind": "classifier_head", "width": 2}],
            K=K,
            mask_mode="multi_mask",
            density=0.5,
        ),
        param_seed=2,
    )


def test_checkpoint_roundtrip(tmp_path):
    net = mm_net()
    opt = OptimizerState("adam")
    opt, _ = adam_step(opt, net.params, {k: np.ones_like(v) for k, v in net.params.items()})
    p = tmp_path / "c.tgwt"
    save_checkpoint(Checkpoint.from_network(net, run_seed=9, optimizer=opt), p)
    ck = load_checkpoint(p)
    assert ck.network == net.config and ck.run_seed == 9
    for k, v in net.params.items():
        assert ck.params[k].tobytes() == v.tobytes()
    assert ck.optimizer.step == 1
    assert all(np.array_equal(ck.optimizer.m[k], opt.m[k]) for k in opt.m)
    restored = ck.to_network()
    assert np.array_equal(restored.mask("tied.0.W", 3).bits, net.mask("tied.0.W", 3).bits)


def test_checkpoint_size_independent_of_K(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    save_checkpoint(Checkpoint.from_network(mm_net(K=2)), a)
    save_checkpoint(Checkpoint.from_network(mm_net(K=8)), b)
    assert a.stat().st_size == b.stat().st_size
    assert set(load_checkpoint(b).params) == set(mm_net().params)


def test_checkpoint_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "c"
    save_checkpoint(Checkpoint.from_network(mm_net()), p)
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(p)


def test_heatmap_files(tmp_path):
    hm = CKAHeatmap(np.array([[1.0, 0.25], [0.25, 0.0]]), ["a", "b"])
    csv_path, pgm_path = write_heatmap(hm, tmp_path / "h")
    labels, values = read_heatmap_csv(csv_path)
    assert labels == ["a", "b"] and np.max(np.abs(values - hm.values)) < 1e-12
    raw = open(pgm_path, "rb").read()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [255, 64, 64, 0]


def test_heatmap_clamps_with_warning(tmp_path):
    with pytest.warns(UserWarning):
        write_heatmap(CKAHeatmap(np.array([[1.2]]), ["a"]), tmp_path / "h")
    assert open(tmp_path / "h.pgm", "rb").read()[-1] == 255
