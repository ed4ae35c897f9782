"""Command-line front end for the pruning toolkit.

Batch-style subcommands cover the whole pipeline: synthesize data, train
a toy model, analyze ranks, decompose, prune (either method), recompose
to a slim model, evaluate, count MACs, and run the paired benchmark.
Exit codes: 0 success, 2 validation/usage error, 3 optimizer divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import linalg, metrics, serialize
from .benchmark import BenchmarkSettings, paired_drops, results_to_csv, run_benchmark
from .decompose import RankReport, canonicalize, decompose_network, estimate_rank
from .errors import DivergenceError, LdrfError
from .pruner import OptimSettings, PruneConfig, valid_range
from .reconstruct import baseline_prune_network, fine_tune, ldrf_prune_network
from .recompose import recompose_network, strip_pruned, verify_equivalence
from .synth import build_toy_net, gen_synthetic
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3


def _parse_shape(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"shape must be c,h,w — got {text!r}")
    return tuple(int(p) for p in parts)


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _load_config(path: str) -> PruneConfig:
    with open(path, encoding="utf-8") as fh:
        return PruneConfig.from_json(fh.read())


def cmd_gen_data(args) -> int:
    x, y = gen_synthetic(
        seed=args.seed, samples=args.samples, classes=args.classes,
        shape=args.shape, separation=args.separation, noise=args.noise,
        jitter=args.jitter,
    )
    serialize.save_dataset(args.out, x, y, args.classes)
    print(f"wrote {args.samples} samples ({args.classes} classes, "
          f"shape {args.shape}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    x, y, classes = serialize.load_dataset(args.data)
    net = build_toy_net(seed=args.seed, input_shape=tuple(x.shape[1:]),
                        classes=classes, widths=tuple(args.widths))
    history = train(net, x, y, TrainConfig(lr=args.lr, epochs=args.epochs,
                                           seed=args.seed))
    loss, acc = metrics.evaluate(net, x, y)
    config = {"command": "train", "epochs": args.epochs, "lr": args.lr,
              "widths": list(args.widths)}
    serialize.save_model(args.out, net, seed=args.seed, config=config)
    print(f"trained {args.epochs} epochs: loss {history[-1]['loss']:.4f}, "
          f"train accuracy {acc:.4f}; saved to {args.out}")
    return EXIT_OK


def _rank_report_for(net, energy: float) -> RankReport:
    report = RankReport(energy=energy)
    for layer in canonicalize(net).layers:
        if layer.kind in ("conv", "dense"):
            s = linalg.svd(layer.weight_matrix().astype(np.float64)).s
            report.add(layer.name, s, estimate_rank(s, energy), layer.out_channels)
    return report


def cmd_analyze(args) -> int:
    net, _, _ = serialize.load_model(args.model)
    report = _rank_report_for(net, args.energy)
    if args.out:
        _write(args.out, report.to_json())
    for entry in report.entries:
        lo, hi = valid_range(entry["z"], entry["n"])
        print(f"{entry['name']}: n={entry['n']} z={entry['z']} "
              f"valid keep range ({entry['z']}, {entry['n']}] -> [{lo}, {hi}]")
    return EXIT_OK


def cmd_decompose(args) -> int:
    net, seed, _ = serialize.load_model(args.model)
    x, y, _ = serialize.load_dataset(args.data)
    dec, report = decompose_network(
        net, args.energy, x, y,
        stat_batches=args.stat_batches,
        finetune_epochs=args.finetune_epochs,
        seed=args.seed if args.seed is not None else (seed or 0),
    )
    config = {"command": "decompose", "energy": args.energy,
              "stat_batches": args.stat_batches,
              "finetune_epochs": args.finetune_epochs}
    serialize.save_model(args.out, dec, seed=args.seed or seed, config=config)
    if args.report:
        _write(args.report, report.to_json())
    ranks = ", ".join(f"{e['name']}:{e['z']}/{e['n']}" for e in report.entries)
    print(f"decomposed at energy {args.energy}: {ranks}; saved to {args.out}")
    return EXIT_OK


def cmd_prune(args) -> int:
    net, _, _ = serialize.load_model(args.model)
    x, y, _ = serialize.load_dataset(args.data)
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if net.form == "decomposed":
        dec, report = net, None
    else:
        dec, report = decompose_network(net, cfg.energy, x, seed=cfg.seed)
    pruned, losses = ldrf_prune_network(dec, cfg, x, y, report=report)
    config = json.loads(cfg.to_json())
    config["command"] = "prune"
    serialize.save_model(args.out, pruned, seed=cfg.seed, config=config)
    if args.report:
        _write(args.report, json.dumps({"version": 1, "layers": losses},
                                       sort_keys=True, indent=2))
    for entry in losses:
        print(f"{entry['layer']}: k={entry['k']} z={entry['z']} "
              f"loss {entry['init_loss']:.6f} -> {entry['final_loss']:.6f}")
    print(f"saved pruned model to {args.out}")
    return EXIT_OK


def cmd_baseline_prune(args) -> int:
    net, _, _ = serialize.load_model(args.model)
    x, _, _ = serialize.load_dataset(args.data)
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    pruned, report = baseline_prune_network(net, cfg, x)
    config = json.loads(cfg.to_json())
    config["command"] = "baseline-prune"
    serialize.save_model(args.out, pruned, seed=cfg.seed, config=config)
    if args.report:
        _write(args.report, json.dumps({"version": 1, "layers": report},
                                       sort_keys=True, indent=2))
    for entry in report:
        print(f"{entry['layer']}: k={entry['k']} refit residual {entry['residual']:.6f}")
    print(f"saved baseline-pruned model to {args.out}")
    return EXIT_OK


def cmd_recompose(args) -> int:
    net, seed, config = serialize.load_model(args.model)
    merged = recompose_network(net) if net.form == "decomposed" else net
    slim = strip_pruned(merged)
    serialize.save_model(args.out, slim, seed=seed, config=config)
    if args.verify_data:
        x, _, _ = serialize.load_dataset(args.verify_data)
        dev = verify_equivalence(net, slim, x[:256])
        print(f"max logit deviation vs source model: {dev:.3e}")
    widths = [f"{l.in_channels}->{l.out_channels}" for l in slim.layers
              if l.kind in ("conv", "dense")]
    print(f"slim model ({', '.join(widths)}) saved to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net, seed, _ = serialize.load_model(args.model)
    x, y, _ = serialize.load_dataset(args.data)
    loss, acc = metrics.evaluate(net, x, y)
    print(f"loss {loss:.6f}  top-1 accuracy {acc:.4f}")
    if args.out:
        _write(args.out, json.dumps({
            "version": 1, "loss": loss, "accuracy": acc,
            "samples": int(x.shape[0]), "seed": seed,
        }, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_flops(args) -> int:
    net, _, _ = serialize.load_model(args.model)
    if args.original:
        orig, _, _ = serialize.load_model(args.original)
        report = metrics.cost_report(orig, net, scope=args.scope)
        text = report.to_csv() if args.out and args.out.endswith(".csv") else report.to_json()
        if args.out:
            _write(args.out, text)
        print(f"total MACs {report.total_original} -> {report.total_pruned} "
              f"(speed-up {report.speedup:.3f}x, scope {args.scope})")
    else:
        total, rows = metrics.net_macs(net, scope=args.scope)
        payload = {"version": 1, "scope": args.scope, "total": total,
                   "layers": [{"layer": n, "macs": m} for n, m in rows]}
        if args.out:
            _write(args.out, json.dumps(payload, sort_keys=True, indent=2))
        for name, macs in rows:
            print(f"{name}: {macs}")
        print(f"total ({args.scope}): {total}")
    return EXIT_OK


def cmd_compare(args) -> int:
    settings = BenchmarkSettings(
        seeds=args.seeds,
        keep_ratio=args.keep_ratio,
        energy=args.energy,
        criterion=args.criterion,
        train_samples=args.samples,
        test_samples=args.test_samples,
        train_epochs=args.train_epochs,
        finetune_epochs=args.finetune_epochs,
        optim=OptimSettings(lr=args.lr, iters=args.iters),
    )
    rows = run_benchmark(settings)
    _write(args.out, results_to_csv(rows))
    drops = paired_drops(rows)
    wins = sum(1 for l, b in drops if l < b)
    med_l = float(np.median([l for l, _ in drops]))
    med_b = float(np.median([b for _, b in drops]))
    print(f"paired seeds: {len(drops)}; reconstruction wins: {wins}")
    print(f"median accuracy drop — ldrf {med_l:.4f}, baseline {med_b:.4f}")
    print(f"results written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldrf",
        description="Neuron pruning via layer decomposition and recomposition.",
    )
    parser.add_argument("--reproducible", action="store_true",
                        help="force single-threaded evaluation for bit-identical runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--shape", type=_parse_shape, default=(3, 16, 16))
    p.add_argument("--separation", type=float, default=1.2)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--jitter", type=int, default=2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the toy CNN on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--widths", type=lambda s: [int(v) for v in s.split(",")],
                   default=[16, 32, 32])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="rank analysis of every linear layer")
    p.add_argument("--model", required=True)
    p.add_argument("--energy", type=float, default=0.65)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("decompose", help="factorize layers into embedding + pointwise")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--energy", type=float, default=0.65)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--stat-batches", type=int, default=8)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("prune", help="embedding-space pruning (decompose + reconstruct)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("baseline-prune", help="layer-by-layer least-squares pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_baseline_prune)

    p = sub.add_parser("recompose", help="merge factors and strip masked channels")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verify-data")
    p.set_defaults(func=cmd_recompose)

    p = sub.add_parser("eval", help="loss/accuracy of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="MAC counts; with --original, a comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--original")
    p.add_argument("--scope", choices=("all", "conv"), default="all")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("compare", help="paired-seed benchmark of both pruners")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--criterion", default="random",
                   help="neuron scoring; 'random' gives both pruners the same "
                        "data-blind masks, isolating reconstruction quality")
    p.add_argument("--energy", type=float, default=0.6)
    p.add_argument("--samples", type=int, default=1024)
    p.add_argument("--test-samples", type=int, default=512)
    p.add_argument("--train-epochs", type=int, default=25)
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.02)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.reproducible:
        os.environ["LDRF_THREADS"] = "1"
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (LdrfError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
