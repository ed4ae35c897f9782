"""MAC accounting, sparsity reporting, theoretical speed-up, and evaluation.

Costs are counted in multiply-accumulates (MACs); reported "FLOPs"
ratios are identical either way.  Sparsity of a layer follows the
weight-matrix definition 1 - (c'*n')/(c*n), which combines channel-level
(inputs) and filter-level (outputs) pruning.
"""

from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .netcore import (
    CONV_KINDS,
    DENSE_KINDS,
    LayerSpec,
    Network,
    conv_output_hw,
    forward,
    walk_shapes,
)
from .training import softmax_cross_entropy


def layer_macs(layer: LayerSpec, in_shape: tuple[int, int, int]) -> int:
    """MACs of one layer for a single sample; ReLU/pool/softmax count zero."""
    c, h, w = in_shape
    if layer.kind in CONV_KINDS:
        ho, wo = conv_output_hw(h, w, layer.k, layer.pad, layer.stride)
        return layer.k * layer.k * layer.in_channels * layer.out_channels * ho * wo
    if layer.kind in DENSE_KINDS:
        return c * h * w * layer.out_channels
    return 0


def net_macs(net: Network, scope: str = "all"):
    """(total, [(name, macs), ...]) over the chosen layer scope."""
    if scope not in ("all", "conv"):
        raise InvalidArgumentError(f"scope must be 'all' or 'conv', got {scope!r}")
    shapes = walk_shapes(net)
    rows = []
    for layer, shape in zip(net.layers, shapes):
        if scope == "conv" and layer.kind not in CONV_KINDS:
            continue
        if layer.kind in CONV_KINDS + DENSE_KINDS:
            rows.append((layer.name, layer_macs(layer, shape)))
    return sum(m for _, m in rows), rows


def sparsity_report(original_counts, pruned_counts):
    """Per-layer sparsity 1 - (c'*n')/(c*n) from (in, out) channel-count pairs.

    Returns a list of dicts with the exact value and the 0.1%-rounded
    display percentage.
    """
    if len(original_counts) != len(pruned_counts):
        raise InvalidArgumentError("count lists must have equal length")
    report = []
    for (c, n), (cp, np_) in zip(original_counts, pruned_counts):
        if cp > c or np_ > n:
            raise InvalidArgumentError(
                f"pruned counts ({cp},{np_}) exceed original ({c},{n})"
            )
        sparsity = 1.0 - (cp * np_) / (c * n)
        # half-up to one decimal: the usual table convention (81.25 -> 81.3),
        # where round() would go half-even
        display = math.floor(1000.0 * sparsity + 0.5) / 10.0
        report.append({
            "in_original": c, "out_original": n,
            "in_pruned": cp, "out_pruned": np_,
            "sparsity": sparsity,
            "sparsity_percent": display,
        })
    return report


def chain_counts(out_channels, first_in: int):
    """Build (in, out) pairs for a conv chain where layer l+1 reads layer l."""
    pairs = []
    prev = first_in
    for n in out_channels:
        pairs.append((prev, n))
        prev = n
    return pairs


def speedup(original: Network, pruned: Network, scope: str = "all") -> float:
    """Total-MAC ratio original/pruned over the chosen scope."""
    total_orig, _ = net_macs(original, scope)
    total_pruned, _ = net_macs(pruned, scope)
    if total_pruned == 0:
        raise InvalidArgumentError("pruned network has zero cost in this scope")
    return total_orig / total_pruned


def _worker_count() -> int:
    raw = os.environ.get("LDRF_THREADS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise InvalidArgumentError(f"LDRF_THREADS must be an integer, got {raw!r}")
    return max(1, workers)


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """(mean cross-entropy, top-1 accuracy) of a classifier network.

    Batches may be sharded across LDRF_THREADS workers; per-batch results
    are aggregated in input order, so the outcome is identical at any
    worker count.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise InvalidArgumentError("dataset is empty")
    if y.shape != (x.shape[0],):
        raise InvalidArgumentError(
            f"labels shape {y.shape} does not match {x.shape[0]} samples"
        )
    chunks = [
        (x[s:s + batch_size], y[s:s + batch_size])
        for s in range(0, x.shape[0], batch_size)
    ]

    def run(chunk):
        cx, cy = chunk
        logits, _ = forward(net, cx)
        loss, _ = softmax_cross_entropy(logits, cy)
        hits = int((logits.argmax(axis=1) == cy).sum())
        return loss * cx.shape[0], hits

    workers = _worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(chunk) for chunk in chunks]
    total_loss = sum(r[0] for r in results)
    total_hits = sum(r[1] for r in results)
    return total_loss / x.shape[0], total_hits / x.shape[0]


@dataclass
class CostReport:
    """Layer-by-layer cost comparison between an original and a pruned network."""

    scope: str
    layers: list[dict] = field(default_factory=list)
    total_original: int = 0
    total_pruned: int = 0
    speedup: float = 1.0

    def to_json(self) -> str:
        return json.dumps({
            "version": 1,
            "scope": self.scope,
            "layers": self.layers,
            "total_original": self.total_original,
            "total_pruned": self.total_pruned,
            "speedup": self.speedup,
        }, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ("layer", "in_original", "out_original", "in_pruned", "out_pruned",
                "macs_original", "macs_pruned", "sparsity_percent")
        buf.write(",".join(cols) + "\n")
        for row in self.layers:
            buf.write(",".join(str(row[c]) for c in cols) + "\n")
        return buf.getvalue()


def cost_report(original: Network, pruned: Network, scope: str = "all") -> CostReport:
    """Match counted layers by position and compare their costs and widths."""
    total_o, rows_o = net_macs(original, scope)
    total_p, rows_p = net_macs(pruned, scope)
    if len(rows_o) != len(rows_p):
        raise InvalidArgumentError(
            f"networks have different counted-layer counts "
            f"({len(rows_o)} vs {len(rows_p)}) in scope {scope!r}"
        )
    if total_p == 0:
        raise InvalidArgumentError("pruned network has zero cost in this scope")
    counted_o = [l for l in original.layers if l.kind in CONV_KINDS + DENSE_KINDS
                 and not (scope == "conv" and l.kind in DENSE_KINDS)]
    counted_p = [l for l in pruned.layers if l.kind in CONV_KINDS + DENSE_KINDS
                 and not (scope == "conv" and l.kind in DENSE_KINDS)]
    report = CostReport(scope=scope, total_original=total_o, total_pruned=total_p,
                        speedup=total_o / total_p)
    for (name, macs_o), (_, macs_p), lo, lp in zip(rows_o, rows_p, counted_o, counted_p):
        sp = sparsity_report(
            [(lo.in_channels, lo.out_channels)],
            [(lp.in_channels, lp.out_channels)],
        )[0]
        sp.update({"layer": name, "macs_original": macs_o, "macs_pruned": macs_p})
        report.layers.append(sp)
    return report
