"""Command-line entry point: ``tiedgrain <command> CONFIG [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import lora as lora_mod
from .analysis import cka_heatmap, probe_tied_layers
from .config import RunConfig
from .data_io import (
    Checkpoint,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    write_heatmap,
    write_metrics_csv,
    write_rows_csv,
)
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .masking import effective_param_count, expected_kept_fraction, hamming_distance, validate_two_four
from .model import backward, build_network, count_params, forward, softmax_cross_entropy
from .solver import deq_backward, deq_forward
from .training import (
    OptimizerState,
    TrainingAborted,
    default_total_steps,
    evaluate,
    normalize,
    optimizer_step,
    train_loop,
)
from .tensor_core import Rng, derive_stream_seed

log = logging.getLogger("tiedgrain")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _prepare_output(path, force):
    if os.path.exists(path) and not force:
        raise ConfigError(f"output directory {path!r} exists; pass --force to reuse it", "output.dir")
    os.makedirs(path, exist_ok=True)
    return path


def _check_deq(cfg):
    if not cfg.input_injection:
        raise ConfigError("equilibrium mode needs input_injection=true", "model.input_injection")
    if cfg.mask_mode == "multi_mask":
        raise ConfigError("equilibrium mode needs a stationary map (dense or same_mask)", "model.mask_mode")
    if not cfg.shared:
        raise ConfigError("equilibrium mode needs shared tied weights", "model.shared")


def _check_input(net, data):
    if data.input_shape != net.config.input_shape:
        raise ConfigError(
            f"dataset samples have shape {data.input_shape}, network expects {net.config.input_shape}",
            "data",
        )


def _normalized(rc, data, x):
    if rc.section("train").get("augment", {}).get("normalize"):
        return normalize(np.asarray(x, dtype=np.float64), data.mean, data.std)
    return x


# -- commands --------------------------------------------------------------


def _run_training(rc: RunConfig, args, mode):
    data = load_dataset(rc.dataset_spec())
    cfg = rc.network_config()
    if mode == "deq":
        _check_deq(cfg)
    net = build_network(cfg, rc.param_seed)
    _check_input(net, data)
    tc = rc.train_config(mode, data.mean, data.std)
    opt = rc.optimizer()
    sched = rc.schedule(default_total_steps(tc, len(data.x_train), net), opt.lr)
    out = _prepare_output(args.out or rc.output_dir(), args.force)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rc.dumps())
    metrics = os.path.join(out, "metrics.csv")
    try:
        res = train_loop(net, data, tc, opt, sched)
    except TrainingAborted as exc:
        write_metrics_csv(exc.rows, metrics)
        raise
    write_metrics_csv(res.rows, metrics)
    ck = Checkpoint.from_network(res.net, tc.seed, res.optimizer, {"mode": mode})
    save_checkpoint(ck, os.path.join(out, "checkpoint.tgwt"))
    last = res.rows[-1] if res.rows else None
    if last:
        print(f"{mode}: {last.step} steps, test_acc {last.test_acc:.4f}, cum_flops {last.cum_flops}")
    return EXIT_OK


def cmd_train(rc, args):
    return _run_training(rc, args, "tied")


def cmd_deq_train(rc, args):
    return _run_training(rc, args, "deq")


def _time_per_batch(fn, batches, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(batches):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times)) * 1000.0


def bench_network(net, x, y, solver, batches=5, warmup=1):
    """Median per-batch forward+backward milliseconds for tied and equilibrium modes."""
    _check_deq(net.config)

    def tied():
        out, tr = forward(net, x, trace=True)
        _, d = softmax_cross_entropy(out, y)
        backward(net, d, tr)

    iters = {}

    def deq():
        out, tr = deq_forward(net, x, solver, trace=True)
        _, d = softmax_cross_entropy(out, y)
        _, adj = deq_backward(net, d, tr, solver)
        iters["forward"], iters["backward"] = tr.result.iterations, adj

    t_tied = _time_per_batch(tied, batches, warmup)
    t_deq = _time_per_batch(deq, batches, warmup)
    return t_tied, t_deq, iters


def cmd_bench(rc, args):
    data = load_dataset(rc.dataset_spec())
    cfg = rc.network_config()
    _check_deq(cfg)
    net = build_network(cfg, rc.param_seed)
    _check_input(net, data)
    b = rc.section("bench")
    bs = b.get("batch_size", rc.section("train").get("batch_size", 128))
    x = _normalized(rc, data, data.x_train[:bs])
    y = data.y_train[:bs]
    t_tied, t_deq, iters = bench_network(net, x, y, rc.solver(), b.get("batches", 5), b.get("warmup", 1))
    out = _prepare_output(args.out or rc.output_dir(), args.force)
    params = count_params(net)
    rows = [
        ("weight_tied", f"K={cfg.K}", params, round(t_tied, 3), 1.0),
        ("deq", f"fwd={iters['forward']};bwd={iters['backward']}", params, round(t_deq, 3),
         round(t_deq / t_tied, 3)),
    ]
    write_rows_csv(("model", "iterations", "params", "per_batch_ms", "relative"), rows,
                   os.path.join(out, "bench.csv"))
    for r in rows:
        print(",".join(str(v) for v in r))
    print(f"ratio deq/tied = {t_deq / t_tied:.2f}")
    return EXIT_OK


def _load_for_analysis(rc, args):
    ck = load_checkpoint(args.checkpoint)
    net = ck.to_network()
    data = load_dataset(rc.dataset_spec())
    _check_input(net, data)
    return net, data


def cmd_cka(rc, args):
    net, data = _load_for_analysis(rc, args)
    m = rc.section("analysis").get("batch_size", 512)
    x = _normalized(rc, data, data.x_test[:m])
    hm = cka_heatmap(net, x)
    out = _prepare_output(args.out or rc.output_dir(), args.force)
    write_heatmap(hm, os.path.join(out, "heatmap"))
    print(f"heatmap {len(hm.labels)}x{len(hm.labels)}: {' '.join(hm.labels)}")
    return EXIT_OK


def cmd_probe(rc, args):
    net, data = _load_for_analysis(rc, args)
    a = rc.section("analysis")
    cap = a.get("max_samples")
    xtr, ytr = data.x_train[:cap], data.y_train[:cap]
    xte, yte = data.x_test[:cap], data.y_test[:cap]
    res = probe_tied_layers(
        net, _normalized(rc, data, xtr), ytr, _normalized(rc, data, xte), yte,
        a.get("probe_epochs", 100), a.get("probe_lr", 0.1),
    )
    out = _prepare_output(args.out or rc.output_dir(), args.force)
    write_rows_csv(("layer", "accuracy"), list(zip(res.layers, res.accuracies)),
                   os.path.join(out, "probe.csv"))
    for layer, acc in zip(res.layers, res.accuracies):
        print(f"tied{layer}: {acc:.4f}")
    return EXIT_OK


def lora_targets(net, names=None, rank=1):
    """Named targets, or by default every 2-d dense weight with min side >= 4 * rank."""
    if names:
        missing = [n for n in names if n not in net.params]
        if missing:
            raise ConfigError(f"unknown adapter targets {missing}", "lora.targets")
        bad = [n for n in names if net.params[n].ndim != 2]
        if bad:
            raise ConfigError(f"adapters need 2-d dense weights, got {bad}", "lora.targets")
        return list(names)
    out = [
        n for n, p in net.params.items()
        if n.endswith(".W") and p.ndim == 2 and min(p.shape) >= 4 * rank
    ]
    if not out:
        raise ConfigError(f"no dense weight is large enough for rank {rank}", "lora.targets")
    return out


def train_adapters(net, data, lcfg, x_norm=lambda x: x):
    """Train multi-mask adapters on frozen ``net``; returns ``(adapters, rows, merged_net)``."""
    targets = lora_targets(net, lcfg.get("targets"), lcfg.get("rank", 2))
    seed = lcfg.get("seed", 0)
    adapters = {}
    for k, name in enumerate(targets):
        d1, d2 = net.params[name].shape
        rank = min(lcfg.get("rank", 2), d1, d2)
        adapters[name] = lora_mod.init_adapter(
            d1, d2, rank, lcfg.get("depth", 1), derive_stream_seed(seed, k),
            lcfg.get("density", 1.0), lcfg.get("scheme", "exact_count"),
            mask_seed=derive_stream_seed(lcfg.get("mask_seed", 0), k),
        )
    base = net.params
    opt = OptimizerState("adam", lr=lcfg.get("lr", 1e-2))
    shuffle = Rng(derive_stream_seed(seed, 0x10A))
    bs = lcfg.get("batch_size", 128)
    rows = []

    def merged():
        params = dict(base)
        for name, ad in adapters.items():
            params[name] = lora_mod.lora_merge(ad, base[name])
        return net.with_params(params)

    for epoch in range(1, lcfg.get("epochs", 5) + 1):
        order = shuffle.permutation(len(data.x_train))
        loss_sum = correct = 0.0
        for s in range(0, len(order), bs):
            idx = order[s : s + bs]
            xb, yb = x_norm(data.x_train[idx]), data.y_train[idx]
            cur = merged()
            out, tr = forward(cur, xb, trace=True)
            loss, d = softmax_cross_entropy(out, yb)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite adapter loss in epoch {epoch}")
            grads = backward(cur, d, tr)
            factors, fgrads = {}, {}
            for name, ad in adapters.items():
                dA, dB = lora_mod.lora_grads(ad, grads[name])
                factors[name + ":A"], factors[name + ":B"] = ad.A, ad.B
                fgrads[name + ":A"], fgrads[name + ":B"] = dA, dB
            opt, factors = optimizer_step(opt, factors, fgrads)
            for name, ad in adapters.items():
                adapters[name] = ad.with_factors(factors[name + ":A"], factors[name + ":B"])
            loss_sum += loss * len(idx)
            correct += float(np.sum(np.argmax(out, axis=1) == yb))
        test_acc = evaluate(merged(), x_norm(data.x_test), data.y_test)
        n = len(order)
        rows.append((epoch, loss_sum / n, correct / n, test_acc))
    return adapters, rows, merged()


def cmd_lora_train(rc, args):
    net, data = _load_for_analysis(rc, args)
    lcfg = rc.section("lora")
    norm = lambda x: _normalized(rc, data, x)  # noqa: E731
    before = evaluate(net, norm(data.x_test), data.y_test)
    adapters, rows, merged = train_adapters(net, data, lcfg, norm)
    out = _prepare_output(args.out or rc.output_dir(), args.force)
    write_rows_csv(("epoch", "train_loss", "train_acc", "test_acc"), rows,
                   os.path.join(out, "lora_metrics.csv"))
    trainable = sum(a.trainable_count() for a in adapters.values())
    report = [
        ("base_params", count_params(net)),
        ("trainable_params", trainable),
        ("adapter_depth", lcfg.get("depth", 1)),
        ("test_acc_before", before),
        ("test_acc_after", rows[-1][3] if rows else before),
    ]
    write_rows_csv(("metric", "value"), report, os.path.join(out, "lora_report.csv"))
    save_checkpoint(Checkpoint.from_network(merged, extra={"lora_merged": True}),
                    os.path.join(out, "merged.tgwt"))
    for k, v in report:
        print(f"{k}: {v}")
    return EXIT_OK


def mask_report(net) -> list:
    """Human-readable lines describing every masked tied weight."""
    cfg = net.config
    lines = [f"mask_mode: {cfg.mask_mode}  scheme: {cfg.scheme}  density: {cfg.density}  K: {cfg.K}"]
    if cfg.mask_mode == "dense":
        lines.append("no masks (dense)")
        return lines
    for name in net.masked_param_names(0):
        names = [name if cfg.shared else name.replace("tied.", f"untied{i}.", 1) for i in range(cfg.K)]
        masks = [net.mask(n, i) for i, n in enumerate(names)]
        size = masks[0].bits.size
        lines.append(f"{name} shape {tuple(masks[0].bits.shape)} n={size}")
        for i, m in enumerate(masks):
            lines.append(f"  step {i}: kept {m.kept_count} density {m.density:.4f}")
        lines.append("  hamming:")
        for i, a in enumerate(masks):
            lines.append("    " + " ".join(str(hamming_distance(a, b)) for b in masks))
        union = effective_param_count(masks)
        distinct = len({m.bits.tobytes() for m in masks})
        sparsity = 1.0 - masks[0].density
        expect = size * expected_kept_fraction(sparsity, distinct)
        lines.append(f"  union: {union} expected {expect:.1f} (1-(1-s)^K over {distinct} distinct masks)")
        if cfg.scheme == "two_to_four":
            ok = all(validate_two_four(m) for m in masks)
            lines.append(f"  2:4 valid: {str(ok).lower()}")
    return lines


def cmd_mask_inspect(rc, args):
    net = build_network(rc.network_config(), rc.param_seed)
    print("\n".join(mask_report(net)))
    return EXIT_OK


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiedgrain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False, output=True):
        sp.add_argument("config", help="run configuration (JSON)")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config value, e.g. model.K=4 (repeatable)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint file (.tgwt)")
        if output:
            sp.add_argument("--out", help="output directory (overrides output.dir)")
            sp.add_argument("--force", action="store_true", help="allow an existing output directory")

    for name, fn, ck, helptext in (
        ("train", cmd_train, False, "train a weight-tied network"),
        ("deq-train", cmd_deq_train, False, "train in equilibrium mode"),
        ("bench", cmd_bench, False, "time weight-tied vs equilibrium per batch"),
        ("cka", cmd_cka, True, "write a CKA heatmap for a checkpoint"),
        ("probe", cmd_probe, True, "linear-probe every tied layer of a checkpoint"),
        ("lora-train", cmd_lora_train, True, "train multi-mask adapters on a frozen checkpoint"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp, checkpoint=ck)
        sp.set_defaults(func=fn)
    mask = sub.add_parser("mask", help="mask utilities")
    msub = mask.add_subparsers(dest="mask_command", required=True)
    ins = msub.add_parser("inspect", help="report mask statistics for a config")
    common(ins, output=False)
    ins.set_defaults(func=cmd_mask_inspect)
    return p


def _threads_env():
    raw = os.environ.get("TIEDGRAIN_THREADS", "0")
    try:
        if int(raw) < 0:
            raise ValueError
    except ValueError:
        raise ConfigError(f"TIEDGRAIN_THREADS must be a nonnegative integer, got {raw!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads_env()
        rc = RunConfig.from_file(args.config, args.set)
        return args.func(rc, args)
    except (ConfigError, FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
