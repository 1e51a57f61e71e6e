"""Dataset readers, synthetic generators, checkpoints and artifact writers."""

from __future__ import annotations

import csv
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError
from .model import Network, NetworkConfig
from .tensor_core import Rng, derive_stream_seed
from .training import OptimizerState

DATASET_KINDS = ("cifar10_bin", "idx", "synthetic_spiral", "synthetic_blobs")
CIFAR_RECORD = 3073
SPLIT_STREAM = 0x5B1


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    path: str | None = None
    n: int = 1000
    classes: int = 3
    noise: float = 0.2
    seed: int = 0
    dim: int = 2
    test_fraction: float = 0.2
    limit: int | None = None
    mean: tuple | None = None
    std: tuple | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {DATASET_KINDS}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must lie in [0, 1), got {self.test_fraction}")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    classes: int
    mean: np.ndarray
    std: np.ndarray

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])


# -- readers ---------------------------------------------------------------


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def load_cifar10_binary(path):
    """Read one CIFAR-10 binary batch: ``(images (N,3,32,32) in [0,1], labels)``."""
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        expected = max(1, math.ceil(len(raw) / CIFAR_RECORD)) * CIFAR_RECORD
        raise FormatError(
            f"{path}: size {len(raw)} bytes is not a multiple of {CIFAR_RECORD} "
            f"(expected e.g. {expected} bytes, got {len(raw)})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: corrupt record {bad[0]}: label byte {labels[bad[0]]} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def load_idx(path) -> np.ndarray:
    """Read an IDX (MNIST-style) file; dimensions are big-endian u32."""
    raw = _read_bytes(path)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise FormatError(f"{path}: unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    need = header + math.prod(dims) * dtype.itemsize
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def _balanced_labels(n, classes):
    return np.arange(n) % classes


def generate_synthetic(spec: DatasetSpec):
    """Spiral arms or Gaussian blobs; returns ``(x, y)`` with balanced classes.

    Class ``c`` gets ``n // classes`` points, plus one for the first
    ``n % classes`` classes.
    """
    if spec.classes < 2:
        raise ConfigError(f"synthetic data needs >= 2 classes, got {spec.classes}")
    if spec.n < 2 * spec.classes:
        raise ConfigError(f"need n >= 2 * classes, got n={spec.n}, classes={spec.classes}")
    if spec.noise < 0:
        raise ConfigError(f"noise must be nonnegative, got {spec.noise}")
    rng = Rng(derive_stream_seed(spec.seed, 0))
    y = np.sort(_balanced_labels(spec.n, spec.classes))
    if spec.kind == "synthetic_spiral":
        # position along the arm, per class
        t = np.zeros(spec.n)
        for c in range(spec.classes):
            idx = np.flatnonzero(y == c)
            t[idx] = np.linspace(0.0, 1.0, idx.size)
        angle = t * 4.0 + y * (2 * math.pi / spec.classes) + spec.noise * rng.normal(spec.n)
        x = np.stack([t * np.sin(angle), t * np.cos(angle)], axis=1)
    elif spec.kind == "synthetic_blobs":
        if spec.dim < 2:
            raise ConfigError(f"blobs need dim >= 2, got {spec.dim}")
        theta = 2 * math.pi * np.arange(spec.classes) / spec.classes
        centers = np.zeros((spec.classes, spec.dim))
        centers[:, 0] = 3.0 * np.cos(theta)
        centers[:, 1] = 3.0 * np.sin(theta)
        x = centers[y] + spec.noise * rng.normal(spec.n * spec.dim).reshape(spec.n, spec.dim)
    else:
        raise ConfigError(f"{spec.kind} is not a synthetic dataset")
    return x, y


def _split(x, y, spec):
    order = Rng(derive_stream_seed(spec.seed, SPLIT_STREAM)).permutation(len(x))
    n_test = int(round(spec.test_fraction * len(x)))
    te, tr = order[:n_test], order[n_test:]
    return x[tr], y[tr], x[te], y[te]


def _cifar_files(path):
    if os.path.isdir(path):
        train = [os.path.join(path, f"data_batch_{i}.bin") for i in range(1, 6)]
        train = [p for p in train if os.path.exists(p)]
        test = os.path.join(path, "test_batch.bin")
        if not train:
            raise ConfigError(f"no data_batch_*.bin files under {path}", path="data.path")
        return train, test if os.path.exists(test) else None
    return [path], None


def _load_real(spec):
    if spec.path is None:
        raise ConfigError("dataset path is required", path="data.path")
    if not os.path.exists(spec.path):
        raise ConfigError(f"dataset path {spec.path!r} does not exist", path="data.path")
    if spec.kind == "cifar10_bin":
        train_files, test_file = _cifar_files(spec.path)
        parts = [load_cifar10_binary(p) for p in train_files]
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        test = load_cifar10_binary(test_file) if test_file else None
    else:
        if not os.path.isdir(spec.path):
            raise ConfigError("idx datasets expect a directory of MNIST-named files", "data.path")
        names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
        files = [os.path.join(spec.path, f) for f in names]
        x = load_idx(files[0]).astype(np.float64)[:, None] / 255.0
        y = load_idx(files[1]).astype(np.int64)
        test = None
        if os.path.exists(files[2]):
            test = (load_idx(files[2]).astype(np.float64)[:, None] / 255.0,
                    load_idx(files[3]).astype(np.int64))
        if len(x) != len(y):
            raise FormatError(f"{files[0]}: {len(x)} images but {len(y)} labels")
    return x, y, test


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Materialise ``spec`` as a train/test split with normalization stats.

    Stats come from ``spec.mean``/``spec.std`` or else from the training
    split, per channel (axis 1).
    """
    if spec.kind.startswith("synthetic"):
        x, y = generate_synthetic(spec)
        xtr, ytr, xte, yte = _split(x, y, spec)
        classes = spec.classes
    else:
        x, y, test = _load_real(spec)
        if spec.limit is not None:
            x, y = x[: spec.limit], y[: spec.limit]
        if test is None:
            xtr, ytr, xte, yte = _split(x, y, spec)
        else:
            xtr, ytr = x, y
            xte, yte = test
            if spec.limit is not None:
                xte, yte = xte[: spec.limit], yte[: spec.limit]
        classes = int(max(ytr.max(), yte.max() if len(yte) else 0)) + 1
    axes = (0,) + tuple(range(2, xtr.ndim))
    mean = np.asarray(spec.mean, dtype=np.float64) if spec.mean is not None else xtr.mean(axis=axes)
    std = np.asarray(spec.std, dtype=np.float64) if spec.std is not None else xtr.std(axis=axes)
    std = np.where(std > 0, std, 1.0)
    return Dataset(xtr, ytr, xte, yte, classes, mean, std)


# -- checkpoints -----------------------------------------------------------

MAGIC = b"TGWT"
VERSION = 1


@dataclass
class Checkpoint:
    network: NetworkConfig
    params: dict
    param_seed: int = 0
    run_seed: int = 0
    optimizer: OptimizerState | None = None
    extra: dict | None = None

    @classmethod
    def from_network(cls, net: Network, run_seed=0, optimizer=None, extra=None) -> "Checkpoint":
        return cls(net.config, net.params, net.param_seed, run_seed, optimizer, extra)

    def to_network(self) -> Network:
        from .model import build_network

        net = build_network(self.network, self.param_seed)
        missing = set(net.params) - set(self.params)
        if missing:
            raise FormatError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, p in net.params.items():
            if self.params[name].shape != p.shape:
                raise FormatError(f"parameter {name} has shape {self.params[name].shape}, expected {p.shape}")
        return net.with_params({k: self.params[k] for k in net.params})


def _config_text(ck: Checkpoint) -> bytes:
    doc = {
        "network": ck.network.to_dict(),
        "param_seed": ck.param_seed,
        "run_seed": ck.run_seed,
        "optimizer": ck.optimizer.hyper() if ck.optimizer else None,
        "extra": ck.extra,
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def _tensors(ck: Checkpoint):
    out = [(name, ck.params[name]) for name in sorted(ck.params)]
    if ck.optimizer:
        for slot in ("m", "v"):
            moments = getattr(ck.optimizer, slot)
            out += [(f"opt.{slot}:{k}", np.asarray(moments[k])) for k in sorted(moments)]
    return out


def save_checkpoint(ck: Checkpoint, path) -> None:
    text = _config_text(ck)
    tensors = _tensors(ck)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        key = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise ConfigError(f"cannot write checkpoint {path}: {exc.strerror}") from None


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at offset {self.pos} "
                f"(need {n} bytes, {len(self.raw) - self.pos} left)"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(_read_bytes(path), path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    doc = json.loads(r.take(r.u32("config length"), "config text").decode("utf-8"))
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        ndim = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}"))
        count = math.prod(shape)
        data = r.take(8 * count, f"values of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes at offset {r.pos}")
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = None
    if doc["optimizer"]:
        opt = OptimizerState(**doc["optimizer"])
        for k, v in tensors.items():
            if k.startswith("opt."):
                slot, name = k[4:].split(":", 1)
                getattr(opt, slot)[name] = v
    return Checkpoint(
        NetworkConfig.from_dict(doc["network"]),
        params,
        doc["param_seed"],
        doc["run_seed"],
        opt,
        doc["extra"],
    )


# -- artifacts -------------------------------------------------------------


def write_heatmap(heatmap, stem) -> tuple:
    """Write ``<stem>.csv`` (label header then P x P values) and ``<stem>.pgm``.

    PGM pixels are round(255 * v); missing cells render as 0.
    """
    values = np.asarray(heatmap.values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
        warnings.warn("heatmap values outside [0, 1] were clamped", stacklevel=2)
    clamped = np.clip(values, 0.0, 1.0)
    csv_path, pgm_path = f"{stem}.csv", f"{stem}.pgm"
    rows, cols = values.shape
    try:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(heatmap.labels)
            for row in values:
                w.writerow([repr(float(v)) for v in row])
        pixels = np.where(np.isfinite(clamped), np.floor(255.0 * clamped + 0.5), 0).astype(np.uint8)
        with open(pgm_path, "wb") as fh:
            fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise ConfigError(f"cannot write heatmap {exc.filename}: {exc.strerror}") from None
    return csv_path, pgm_path


def read_heatmap_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


METRICS_HEADER = ("epoch", "step", "train_loss", "train_acc", "test_acc", "cum_flops", "wall_ms")


def write_metrics_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([
                r.epoch, r.step, repr(float(r.train_loss)), repr(float(r.train_acc)),
                repr(float(r.test_acc)), r.cum_flops, r.wall_ms,
            ])


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_rows_csv(header, rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])
