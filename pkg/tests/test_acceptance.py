"""Acceptance suite: ten end-to-end checks, one verdict line each.

Each test prints a single ``[acceptance NN] PASS/FAIL`` line (visible
under ``pytest -s`` or in the captured output of a failing run) and then
asserts the criterion at its stated tolerance.  The two ten-seed
benchmark fixtures come from conftest.py and are built once per session.
"""

import json
import time

import numpy as np
import pytest

from ldrf.benchmark import paired_drops, run_pair
from ldrf.cli import main
from ldrf.decompose import (
    RankReport,
    decompose_layer,
    decompose_network,
    estimate_rank,
    fold_normalization,
)
from ldrf.linalg import svd
from ldrf.metrics import chain_counts, evaluate, net_macs, sparsity_report
from ldrf.netcore import LayerSpec
from ldrf.pruner import CRITERIA, OptimSettings, PruneConfig
from ldrf.reconstruct import ldrf_prune_network, recon_grad, recon_loss
from ldrf.recompose import recompose_network, strip_pruned, verify_equivalence
from ldrf.synth import (
    VGG9_CONV_CHANNELS,
    build_toy_net,
    equalize_scales,
    gen_synthetic,
    make_vgg9_shapes,
)
from ldrf.training import TrainConfig, train

from oracles import central_differences
from recon_cases import kink_free_coordinates, random_problem

# Reference per-layer keep counts for the four speed-up configurations of
# the six-conv reference network, and the sparsity percentages reported
# alongside them.
SPEEDUP_KEEPS = {
    2: (12, 36, 74, 98, 236, 256),
    3: (6, 18, 65, 98, 178, 206),
    4: (6, 18, 37, 69, 178, 206),
    5: (6, 18, 37, 49, 152, 206),
}
EXPECTED_SPARSITY = {
    2: (81.3, 89.5, 67.5, 55.7, 29.4, 7.8),
    3: (90.6, 97.4, 85.7, 61.1, 46.8, 44.0),
    4: (90.6, 97.4, 91.9, 84.4, 62.5, 44.0),
    5: (90.6, 97.4, 91.9, 88.9, 77.3, 52.2),
}


def _verdict(num, ok, detail):
    print(f"[acceptance {num:02d}] {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"acceptance {num:02d}: {detail}"


@pytest.fixture(scope="module")
def small_net():
    """A trained, scale-equalized toy network plus its training data."""
    x, y = gen_synthetic(0, 256, classes=4, shape=(2, 8, 8),
                         separation=1.5, noise=0.8)
    net = build_toy_net(seed=0, input_shape=(2, 8, 8), classes=4,
                        widths=(4, 6, 6))
    train(net, x, y, TrainConfig(lr=0.05, epochs=6, batch=32, seed=0))
    equalize_scales(net, x)
    return net, x, y


@pytest.fixture(scope="module")
def cli_art(tmp_path_factory):
    """Dataset, trained model, and rank report written through the CLI."""
    d = tmp_path_factory.mktemp("acceptance_cli")
    paths = {
        "data": str(d / "data.ldds"),
        "model": str(d / "model.ldrf"),
        "analysis": str(d / "ranks.json"),
    }
    assert main(["gen-data", "--out", paths["data"], "--seed", "0",
                 "--samples", "192", "--classes", "4", "--shape", "2,8,8",
                 "--separation", "1.5", "--noise", "0.8"]) == 0
    assert main(["train", "--data", paths["data"], "--out", paths["model"],
                 "--seed", "0", "--epochs", "6", "--widths", "4,6,6"]) == 0
    assert main(["analyze", "--model", paths["model"], "--energy", "0.5",
                 "--out", paths["analysis"]]) == 0
    with open(paths["analysis"], encoding="utf-8") as fh:
        paths["ranks"] = RankReport.from_json(fh.read())
    return paths


def test_01_reference_sparsity_table():
    """All 24 sparsity cells follow from the keep counts within 0.1pp."""
    t0 = time.monotonic()
    original = chain_counts(VGG9_CONV_CHANNELS, 3)
    worst = 0.0
    for factor, keeps in SPEEDUP_KEEPS.items():
        report = sparsity_report(original, chain_counts(keeps, 3))
        for row, expect in zip(report, EXPECTED_SPARSITY[factor]):
            worst = max(worst, abs(row["sparsity_percent"] - expect))
    elapsed = time.monotonic() - t0
    _verdict(1, worst <= 0.1 and elapsed < 1.0,
             f"24 cells, worst deviation {worst:.3f}pp, {elapsed:.2f}s")


def test_02_conv_mac_ratios_match_speedup_labels():
    """Conv-only MAC reduction lands within 15% of each nominal factor."""
    t0 = time.monotonic()
    base = make_vgg9_shapes(VGG9_CONV_CHANNELS)
    base_macs, _ = net_macs(base, scope="conv")
    ratios = {}
    for factor, keeps in SPEEDUP_KEEPS.items():
        slim_macs, _ = net_macs(make_vgg9_shapes(keeps), scope="conv")
        ratios[factor] = base_macs / slim_macs
    elapsed = time.monotonic() - t0
    worst = max(abs(r / f - 1.0) for f, r in ratios.items())
    detail = ", ".join(f"{f}x:{r:.2f}" for f, r in sorted(ratios.items()))
    _verdict(2, worst <= 0.15 and elapsed < 1.0,
             f"measured {detail} (worst off by {worst:.1%}), {elapsed:.2f}s")


def test_03_full_energy_factorization_is_lossless(small_net):
    """Energy 1.0 round-trips weights and logits; folding changes nothing."""
    net, x, _ = small_net
    dec, _ = decompose_network(net, 1.0, x, seed=0)
    merged = recompose_network(dec)
    by_name = {layer.name: layer for layer in net.layers}
    worst_rel = 0.0
    for layer in merged.layers:
        if layer.weight is None:
            continue
        w0 = by_name[layer.name].weight_matrix().astype(np.float64)
        w1 = layer.weight_matrix().astype(np.float64)
        worst_rel = max(worst_rel,
                        np.linalg.norm(w1 - w0) / np.linalg.norm(w0))
    logit_dev = max(verify_equivalence(net, dec, x[:128]),
                    verify_equivalence(net, merged, x[:128]))

    # normalization folding must leave the composed layer output unchanged
    rng = np.random.default_rng(7)
    layer = LayerSpec(kind="dense", name="probe", in_channels=12,
                      out_channels=9,
                      weight=rng.normal(size=(12, 9)).astype(np.float32),
                      bias=rng.normal(size=9).astype(np.float32))
    dl = decompose_layer(layer, 1.0)
    folded = fold_normalization(dl, rng.normal(size=dl.z),
                                rng.uniform(0.5, 2.0, size=dl.z))
    xs = rng.normal(size=(64, 12))

    def composed(d):
        return (xs @ d.q_matrix() + d.q_bias) @ d.r + d.r_bias

    fold_dev = np.abs(composed(dl) - composed(folded)).max()
    ok = worst_rel <= 1e-5 and logit_dev <= 1e-4 and fold_dev <= 1e-5
    _verdict(3, ok, f"weight rel err {worst_rel:.2e}, logit dev "
                    f"{logit_dev:.2e}, folding dev {fold_dev:.2e}")


def test_04_reconstruction_gradients_match_finite_differences():
    """Analytic gradients agree with central differences on 20 instances."""
    t0 = time.monotonic()
    worst = 0.0
    for seed in range(20):
        p = random_problem(seed)
        analytic = recon_grad(p)
        fd = central_differences(lambda: recon_loss(p), p.variables(), h=1e-3)
        scale = max(max(np.abs(g).max() for g in fd.values()), 1e-8)
        ok_r, ok_rb = kink_free_coordinates(p)
        assert ok_r.any()
        err = max(
            np.abs(analytic["q"] - fd["q"]).max(),
            np.abs(analytic["q_bias"] - fd["q_bias"]).max(),
            np.abs(analytic["r"] - fd["r"])[ok_r].max(initial=0.0),
            np.abs(analytic["r_bias"] - fd["r_bias"])[ok_rb].max(initial=0.0),
        )
        worst = max(worst, err / scale)
    elapsed = time.monotonic() - t0
    _verdict(4, worst <= 1e-4 and elapsed < 60.0,
             f"20 instances, worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_05_embedding_compensation_beats_channel_baseline(hard_cases):
    """At 50% keep the compensated pruner loses less accuracy than the
    layer-wise least-squares baseline, pre fine-tune, on paired seeds."""
    settings = hard_cases["settings"]
    t0 = time.monotonic()
    rows = []
    for case in hard_cases["cases"]:
        rows.extend(run_pair(case, settings))
    total = hard_cases["prep_seconds"] + (time.monotonic() - t0)
    drops = paired_drops(rows)
    wins = sum(1 for ldrf_drop, base_drop in drops if ldrf_drop < base_drop)
    med_ldrf = float(np.median([d[0] for d in drops]))
    med_base = float(np.median([d[1] for d in drops]))
    ok = wins >= 8 and med_ldrf < med_base and total <= 900.0
    _verdict(5, ok, f"{wins}/10 paired wins, median accuracy drop "
                    f"{med_ldrf:+.4f} vs baseline {med_base:+.4f}, "
                    f"{total:.0f}s total")


def test_06_keep_below_rank_rejected_with_valid_range(cli_art, tmp_path,
                                                      capsys):
    """keep <= z exits with code 2 and cites the valid (z, n] interval."""
    entry = cli_art["ranks"].entries[0]
    cfg_path = tmp_path / "bad.json"
    cfg_path.write_text(json.dumps({
        "energy": 0.5, "criterion": "topk", "seed": 0,
        "layers": [{"name": entry["name"], "keep": max(1, entry["z"])}],
        "optim": {"lr": 0.005, "iters": 10},
    }), encoding="utf-8")
    rc = main(["prune", "--model", cli_art["model"], "--data",
               cli_art["data"], "--config", str(cfg_path),
               "--out", str(tmp_path / "x.ldrf")])
    err = capsys.readouterr().err
    cited = f"({entry['z']}, {entry['n']}]" in err
    _verdict(6, rc == 2 and cited,
             f"exit code {rc}, range cited: {cited}")


def test_07_monotonicity_in_keep_and_energy(small_net):
    """Reconstruction loss never rises with extra kept channels (5% tol);
    the chosen rank never falls as the energy threshold grows."""
    net, x, y = small_net
    dec, report = decompose_network(net, 0.5, x, seed=0)
    entry = max(report.entries[:-1], key=lambda e: e["n"] - e["z"])
    base, z, n = entry["name"], entry["z"], entry["n"]
    loss_ok = True
    sweeps = {}
    for seed in (5, 6, 7):
        losses = []
        for keep in range(z + 1, n + 1):
            cfg = PruneConfig(energy=0.5,
                              layers=[{"name": base, "keep": keep}],
                              criterion="topk",
                              optim=OptimSettings(lr=0.01, iters=300,
                                                  batch=64),
                              seed=seed)
            _, reports = ldrf_prune_network(dec, cfg, x, y, report=report)
            losses.append(next(r["final_loss"] for r in reports
                               if r["layer"] == base))
        loss_ok &= all(b <= a * 1.05 + 1e-12
                       for a, b in zip(losses, losses[1:]))
        sweeps[seed] = losses

    energies = np.round(np.arange(0.05, 1.0001, 0.05), 2)
    rank_ok = True
    for layer in net.layers:
        if layer.weight is None:
            continue
        s = svd(layer.weight_matrix().astype(np.float64)).s
        zs = [estimate_rank(s, e) for e in energies]
        rank_ok &= all(b >= a for a, b in zip(zs, zs[1:]))
    loss_txt = "; ".join(
        f"seed {s}: [{', '.join(f'{v:.4f}' for v in vals)}]"
        for s, vals in sweeps.items())
    _verdict(7, loss_ok and rank_ok,
             f"loss over keep {z + 1}..{n}: {loss_txt}; "
             f"ranks monotone in energy: {rank_ok}")


def test_08_slim_network_matches_masked_two_factor_pipeline(small_net):
    """Recompose+strip equals the masked factorized net on 1000 samples."""
    net, x, y = small_net
    dec, report = decompose_network(net, 0.5, x, seed=0)
    layers = []
    for entry in report.entries[:-1]:
        keep = max(entry["z"] + 1, entry["n"] - 2)
        layers.append({"name": entry["name"], "keep": keep})
    cfg = PruneConfig(energy=0.5, layers=layers, criterion="topk",
                      optim=OptimSettings(lr=0.01, iters=150, batch=64),
                      seed=11)
    pruned, _ = ldrf_prune_network(dec, cfg, x, y, report=report)
    slim = strip_pruned(recompose_network(pruned))
    probe, _ = gen_synthetic(99, 1000, classes=4, shape=(2, 8, 8),
                             separation=1.5, noise=0.8)
    dev = verify_equivalence(pruned, slim, probe)
    _verdict(8, dev <= 1e-5,
             f"max logit deviation {dev:.2e} on {probe.shape[0]} samples")


def test_09_selection_criterion_insensitivity(gentle_cases):
    """With ample capacity, the five selection criteria land within 1.5x
    of each other on ten-seed median pre-fine-tune loss."""
    optim = OptimSettings(lr=0.02, iters=400)
    medians = {}
    for crit in CRITERIA:
        losses = []
        for case in gentle_cases["cases"]:
            cfg = PruneConfig(energy=case.energy,
                              layers=[dict(e) for e in case.keeps],
                              criterion=crit, optim=optim, seed=case.seed)
            pruned, _ = ldrf_prune_network(case.dec, cfg, case.x_train,
                                           case.y_train, report=case.report)
            slim = strip_pruned(recompose_network(pruned))
            loss, _ = evaluate(slim, case.x_test, case.y_test)
            losses.append(loss)
        medians[crit] = float(np.median(losses))
    band = max(medians.values()) / min(medians.values())
    detail = ", ".join(f"{c}={v:.4f}" for c, v in medians.items())
    _verdict(9, band <= 1.5, f"median losses {detail}; band {band:.3f}")


def test_10_reproducible_runs_are_bit_identical(cli_art, tmp_path):
    """Same config + seed under --reproducible: identical bytes out."""
    entry = cli_art["ranks"].entries[0]
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "energy": 0.5, "criterion": "topk", "seed": 1,
        "layers": [{"name": entry["name"],
                    "keep": max(entry["z"] + 1, entry["n"] - 1)}],
        "optim": {"lr": 0.005, "iters": 40, "batch": 64},
    }), encoding="utf-8")
    artifacts = []
    for tag in ("a", "b"):
        model = tmp_path / f"{tag}.ldrf"
        rep = tmp_path / f"{tag}_report.json"
        slim = tmp_path / f"{tag}_slim.ldrf"
        stats = tmp_path / f"{tag}_eval.json"
        assert main(["--reproducible", "prune", "--model", cli_art["model"],
                     "--data", cli_art["data"], "--config", str(cfg_path),
                     "--out", str(model), "--report", str(rep)]) == 0
        assert main(["--reproducible", "recompose", "--model", str(model),
                     "--out", str(slim)]) == 0
        assert main(["--reproducible", "eval", "--model", str(slim),
                     "--data", cli_art["data"], "--out", str(stats)]) == 0
        artifacts.append(tuple(p.read_bytes()
                               for p in (model, rep, slim, stats)))
    same = [a == b for a, b in zip(artifacts[0], artifacts[1])]
    _verdict(10, all(same),
             "model/report/slim/eval byte-identical: " + str(same))
