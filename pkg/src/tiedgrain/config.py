"""JSON run configuration: schema validation, overrides and typed views."""

from __future__ import annotations

import copy
import json
import os
import struct

import jsonschema

from .data_io import DatasetSpec
from .errors import ConfigError
from .model import NetworkConfig, resolve_layout
from .solver import SolverConfig
from .training import AugmentFlags, OptimizerState, ScheduleConfig, TrainConfig

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_layer = _obj(
    {
        "kind": {"type": "string"},
        "width": _int,
        "kernel": _int,
        "stride": _int,
        "pad": _int,
    },
    ["kind"],
)
_layers = {"type": "array", "items": _layer}

SCHEMA = _obj(
    {
        "model": _obj(
            {
                "input_shape": {"type": "array", "items": _int},
                "stem": _layers,
                "tied": _layers,
                "head": _layers,
                "K": {"type": "integer", "minimum": 1},
                "mask_mode": {"enum": ["dense", "same_mask", "multi_mask"]},
                "density": {"type": "number", "minimum": 0, "maximum": 1},
                "scheme": {"enum": ["exact_count", "bernoulli", "two_to_four"]},
                "input_injection": _bool,
                "shared": _bool,
                "init_gain": _num,
                "mask_seed": _int,
                "param_seed": _int,
            },
            ["tied"],
        ),
        "data": _obj(
            {
                "kind": {"enum": ["cifar10_bin", "idx", "synthetic_spiral", "synthetic_blobs"]},
                "path": {"type": "string"},
                "n": _int,
                "classes": _int,
                "noise": _num,
                "seed": _int,
                "dim": _int,
                "test_fraction": _num,
                "limit": _int,
                "mean": {"type": "array", "items": _num},
                "std": {"type": "array", "items": _num},
            },
            ["kind"],
        ),
        "train": _obj(
            {
                "epochs": {"type": "integer", "minimum": 1},
                "flop_budget": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "seed": _int,
                "eval_every": {"type": "integer", "minimum": 1},
                "record_wall": _bool,
                "optimizer": _obj(
                    {
                        "kind": {"enum": ["sgd_momentum", "adam", "adamw"]},
                        "lr": _num,
                        "momentum": _num,
                        "beta1": _num,
                        "beta2": _num,
                        "eps": _num,
                        "weight_decay": _num,
                    }
                ),
                "schedule": _obj(
                    {
                        "kind": {"enum": ["cosine", "multistep", "constant"]},
                        "max_lr": _num,
                        "total_steps": _int,
                        "milestones": {"type": "array", "items": _int},
                        "gamma": _num,
                    }
                ),
                "augment": _obj(
                    {"normalize": _bool, "crop": _bool, "flip": _bool, "pad": _int, "flip_p": _num}
                ),
            }
        ),
        "solver": _obj(
            {
                "tol": _num,
                "max_iter": {"type": "integer", "minimum": 1},
                "method": {"enum": ["anderson", "naive"]},
                "m": {"type": "integer", "minimum": 1},
                "beta": _num,
                "backward_tol": _num,
                "backward_max_iter": {"type": "integer", "minimum": 1},
            }
        ),
        "lora": _obj(
            {
                "rank": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 1},
                "density": {"type": "number", "minimum": 0, "maximum": 1},
                "scheme": {"enum": ["exact_count", "bernoulli", "two_to_four"]},
                "mask_seed": _int,
                "seed": _int,
                "targets": {"type": "array", "items": {"type": "string"}},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": _num,
                "batch_size": {"type": "integer", "minimum": 1},
            }
        ),
        "analysis": _obj(
            {
                "batch_size": {"type": "integer", "minimum": 3},
                "probe_epochs": {"type": "integer", "minimum": 1},
                "probe_lr": _num,
                "max_samples": {"type": "integer", "minimum": 1},
            }
        ),
        "bench": _obj(
            {"batches": {"type": "integer", "minimum": 1}, "batch_size": {"type": "integer", "minimum": 1},
             "warmup": {"type": "integer", "minimum": 0}}
        ),
        "output": _obj({"dir": {"type": "string"}}),
    },
    ["model", "data"],
)


def _dotted(path) -> str:
    return ".".join(str(p) for p in path)


def validate(doc: dict) -> None:
    """Raise :class:`ConfigError` naming the JSON path of the first problem."""
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.path)), e.message))
    if not errors:
        return
    err = errors[0]
    path = list(err.path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        path.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        path.append(extra)
        raise ConfigError(f"unknown key {extra!r}", _dotted(path))
    raise ConfigError(err.message, _dotted(path) or "<root>")


def parse_override(text: str):
    """``a.b.c=value`` with value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like dotted.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    doc = copy.deepcopy(doc)
    for text in overrides or ():
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-object", ".".join(keys))
        node[keys[-1]] = value
    return doc


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def dataset_input_shape(spec: DatasetSpec) -> tuple:
    """Per-sample input shape, read without loading the data."""
    if spec.kind == "cifar10_bin":
        return (3, 32, 32)
    if spec.kind == "synthetic_spiral":
        return (2,)
    if spec.kind == "synthetic_blobs":
        return (spec.dim,)
    path = os.path.join(spec.path or "", "train-images-idx3-ubyte")
    try:
        with open(path, "rb") as fh:
            head = fh.read(16)
    except OSError:
        raise ConfigError(f"cannot read {path}", "data.path") from None
    if len(head) < 16 or head[3] != 3:
        raise ConfigError(f"{path} is not a 3-d IDX image file", "data.path")
    _, h, w = struct.unpack(">3I", head[4:16])
    return (1, h, w)


class RunConfig:
    """A validated run document plus typed accessors for each section."""

    def __init__(self, doc: dict):
        validate(doc)
        self.doc = doc

    @classmethod
    def from_file(cls, path, overrides=()) -> "RunConfig":
        return cls(apply_overrides(load_config_file(path), overrides))

    def section(self, name) -> dict:
        return self.doc.get(name, {})

    def dataset_spec(self) -> DatasetSpec:
        d = dict(self.section("data"))
        for k in ("mean", "std"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return DatasetSpec(**d)
        except ConfigError as exc:
            raise ConfigError(str(exc), "data") from None

    def classes(self) -> int:
        spec = self.dataset_spec()
        return spec.classes if spec.kind.startswith("synthetic") else 10

    def network_config(self) -> NetworkConfig:
        m = dict(self.section("model"))
        m.pop("param_seed", None)
        if "input_shape" not in m:
            m["input_shape"] = list(dataset_input_shape(self.dataset_spec()))
        if "head" not in m:
            m["head"] = self._default_head(m)
        try:
            cfg = NetworkConfig.from_dict(m)
            resolve_layout(cfg)
        except ConfigError as exc:
            raise ConfigError(str(exc), "model") from None
        return cfg

    def _default_head(self, m):
        probe = NetworkConfig.from_dict({**m, "head": []})
        tied_in = resolve_layout(probe).tied_in
        head = [{"kind": "avgpool"}] if len(tied_in) == 3 else []
        return head + [{"kind": "classifier_head", "width": self.classes()}]

    @property
    def param_seed(self) -> int:
        return int(self.section("model").get("param_seed", 0))

    def solver(self) -> SolverConfig:
        return SolverConfig(**self.section("solver"))

    def augment(self, mean=None, std=None) -> AugmentFlags:
        a = self.section("train").get("augment", {})
        return AugmentFlags(
            mean=None if mean is None else tuple(float(v) for v in mean),
            std=None if std is None else tuple(float(v) for v in std),
            **a,
        )

    def train_config(self, mode="tied", mean=None, std=None) -> TrainConfig:
        t = self.section("train")
        keys = ("epochs", "flop_budget", "batch_size", "seed", "eval_every", "record_wall")
        kw = {k: t[k] for k in keys if k in t}
        if "epochs" not in kw and "flop_budget" not in kw:
            kw["epochs"] = 1
        try:
            return TrainConfig(mode=mode, solver=self.solver(), augment=self.augment(mean, std), **kw)
        except ConfigError as exc:
            raise ConfigError(str(exc), "train") from None

    def optimizer(self) -> OptimizerState:
        return OptimizerState(**self.section("train").get("optimizer", {}))

    def schedule(self, total_steps: int, lr: float) -> ScheduleConfig:
        s = dict(self.section("train").get("schedule", {"kind": "constant"}))
        s.setdefault("max_lr", lr)
        s.setdefault("total_steps", total_steps)
        return ScheduleConfig(**s)

    def output_dir(self) -> str:
        return self.section("output").get("dir", "out")

    def resolved(self) -> dict:
        doc = copy.deepcopy(self.doc)
        doc["model"] = {**self.network_config().to_dict(), "param_seed": self.param_seed}
        return doc

    def dumps(self) -> str:
        return json.dumps(self.resolved(), sort_keys=True, indent=2) + "\n"

