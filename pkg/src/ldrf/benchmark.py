"""Paired-seed comparison of embedding-space pruning vs the layer-by-layer baseline.

Each seed gets its own dataset and freshly trained toy network; both
pruners then run with identical keep counts and selection criterion, so
any accuracy gap is attributable to the reconstruction strategy alone.
Used by the `compare` CLI subcommand and by the acceptance suite.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .decompose import decompose_network
from .metrics import evaluate
from .pruner import OptimSettings, PruneConfig
from .reconstruct import baseline_prune_network, fine_tune, ldrf_prune_network
from .recompose import recompose_network, strip_pruned
from .synth import build_toy_net, equalize_scales, gen_synthetic
from .training import TrainConfig, train


@dataclass
class BenchmarkSettings:
    seeds: int = 10
    keep_ratio: float = 0.5
    energy: float = 0.6
    energy_step: float = 0.05
    energy_stop: float = 0.95
    max_teacher_drop: float = 0.005
    criterion: str = "random"
    classes: int = 8
    shape: tuple = (3, 16, 16)
    widths: tuple = (16, 32, 32)
    train_samples: int = 1024
    test_samples: int = 512
    separation: float = 1.2
    noise: float = 1.2
    jitter: int = 3
    train_epochs: int = 25
    train_lr: float = 0.05
    dec_finetune_epochs: int = 8
    dec_finetune_lr: float = 0.01
    finetune_epochs: int = 0
    optim: OptimSettings = field(
        default_factory=lambda: OptimSettings(lr=0.02, iters=1000))


@dataclass
class BenchmarkCase:
    """One seed's trained network, data split, and decomposition."""

    seed: int
    net: object
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    base_acc: float
    base_loss: float
    dec: object
    report: object
    keeps: list
    energy: float = 0.0


def keep_counts(report, ratio: float) -> list[dict]:
    """Per-hidden-layer keep counts: round(ratio*n), clamped into (z, n]."""
    keeps = []
    for entry in report.entries[:-1]:
        k = int(round(ratio * entry["n"]))
        k = max(entry["z"] + 1, min(k, entry["n"]))
        keeps.append({"name": entry["name"], "keep": k})
    return keeps


def prepare_case(seed: int, s: BenchmarkSettings) -> BenchmarkCase:
    """Generate data, train the toy net, and decompose it for one seed.

    The decomposition energy is escalated per seed until the fine-tuned
    two-factor network matches the trained network on the *training* set
    (within ``max_teacher_drop``), so every seed's reconstruction targets
    come from an equally healthy teacher.  Test data never informs the
    escalation.
    """
    total = s.train_samples + s.test_samples
    x, y = gen_synthetic(seed, total, classes=s.classes, shape=s.shape,
                         separation=s.separation, noise=s.noise, jitter=s.jitter)
    x_train, y_train = x[:s.train_samples], y[:s.train_samples]
    x_test, y_test = x[s.train_samples:], y[s.train_samples:]
    net = build_toy_net(seed=seed, input_shape=s.shape, classes=s.classes,
                        widths=s.widths)
    train(net, x_train, y_train,
          TrainConfig(lr=s.train_lr, epochs=s.train_epochs, seed=seed))
    net = equalize_scales(net, x_train[:256])
    base_loss, base_acc = evaluate(net, x_test, y_test)
    _, base_train_acc = evaluate(net, x_train, y_train)
    energy = s.energy
    while True:
        dec, report = decompose_network(
            net, energy, x_train, y_train,
            finetune_epochs=s.dec_finetune_epochs,
            finetune_lr=s.dec_finetune_lr, seed=seed)
        _, dec_train_acc = evaluate(dec, x_train, y_train)
        if (base_train_acc - dec_train_acc <= s.max_teacher_drop
                or energy + s.energy_step > s.energy_stop + 1e-9):
            break
        energy = round(energy + s.energy_step, 10)
    return BenchmarkCase(
        seed=seed, net=net,
        x_train=x_train, y_train=y_train, x_test=x_test, y_test=y_test,
        base_acc=base_acc, base_loss=base_loss,
        dec=dec, report=report,
        keeps=keep_counts(report, s.keep_ratio),
        energy=energy,
    )


def run_pair(case: BenchmarkCase, s: BenchmarkSettings,
             criterion: str | None = None) -> list[dict]:
    """Both pruning methods on one prepared case; returns two result rows."""
    cfg = PruneConfig(
        energy=case.energy,
        layers=[dict(e) for e in case.keeps],
        criterion=criterion or s.criterion,
        optim=s.optim,
        seed=case.seed,
    )
    rows = []

    pruned, _ = ldrf_prune_network(case.dec, cfg, case.x_train, case.y_train,
                                   report=case.report)
    slim_ldrf = strip_pruned(recompose_network(pruned))
    base_net, _ = baseline_prune_network(case.net, cfg, case.x_train)
    slim_base = strip_pruned(base_net)

    for method, slim in (("ldrf", slim_ldrf), ("baseline", slim_base)):
        pre_loss, pre_acc = evaluate(slim, case.x_test, case.y_test)
        row = {
            "seed": case.seed,
            "method": method,
            "criterion": cfg.criterion,
            "keep_ratio": s.keep_ratio,
            "base_acc": case.base_acc,
            "pre_ft_acc": pre_acc,
            "pre_ft_loss": pre_loss,
            "post_ft_acc": "",
        }
        if s.finetune_epochs > 0:
            tuned = slim.copy()
            fine_tune(tuned, case.x_train, case.y_train, s.finetune_epochs,
                      seed=case.seed)
            _, post_acc = evaluate(tuned, case.x_test, case.y_test)
            row["post_ft_acc"] = post_acc
        rows.append(row)
    return rows


def run_benchmark(s: BenchmarkSettings, cases: list[BenchmarkCase] | None = None):
    """Full paired comparison over all seeds; returns flat result rows."""
    if cases is None:
        cases = [prepare_case(seed, s) for seed in range(s.seeds)]
    rows = []
    for case in cases:
        rows.extend(run_pair(case, s))
    return rows


def results_to_csv(rows: list[dict]) -> str:
    cols = ("seed", "method", "criterion", "keep_ratio", "base_acc",
            "pre_ft_acc", "pre_ft_loss", "post_ft_acc")
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    for row in rows:
        buf.write(",".join(str(row[c]) for c in cols) + "\n")
    return buf.getvalue()


def paired_drops(rows: list[dict]):
    """Per-seed (ldrf_drop, baseline_drop) accuracy drops from result rows."""
    by_seed: dict[int, dict[str, dict]] = {}
    for row in rows:
        by_seed.setdefault(row["seed"], {})[row["method"]] = row
    drops = []
    for seed in sorted(by_seed):
        pair = by_seed[seed]
        drops.append((
            pair["ldrf"]["base_acc"] - pair["ldrf"]["pre_ft_acc"],
            pair["baseline"]["base_acc"] - pair["baseline"]["pre_ft_acc"],
        ))
    return drops
