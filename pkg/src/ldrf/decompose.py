"""Cross-channel decomposition of linear layers into embedding + pointwise factors.

Each weight, reshaped to a (k*k*c, n) matrix, is factorized by truncated
SVD into Q (k*k*c, z) and R (z, n) with W ~= Q R.  Q is materialized as a
k x k convolution with z output channels (the "embedding" of the layer's
input) and R as a 1x1 convolution mapping z -> n; ReLU stays after the
pointwise factor.  The rank z is the smallest prefix of singular values
whose cumulative sum reaches a configured energy fraction.  Embedding
outputs are then normalized to roughly zero mean / unit variance using
batch statistics, folded into the factors so the layer's output is
unchanged — this lets a single learning rate drive the later per-layer
reconstruction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DegenerateLayerError, InvalidArgumentError
from .netcore import (
    CONV_KINDS,
    DENSE_KINDS,
    WEIGHTED_KINDS,
    LayerSpec,
    Network,
    fold_batchnorm,
    forward,
    fuse_standalone_relu,
)

VAR_EPS = 1e-8


def estimate_rank(singular_values, energy: float) -> int:
    """Smallest z with (sum of the z largest singular values) / (total sum) >= energy."""
    s = np.asarray(singular_values, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidArgumentError("singular values must be a non-empty 1-D sequence")
    if np.any(s < 0) or np.any(np.diff(s) > 1e-12):
        raise InvalidArgumentError("singular values must be non-negative and non-increasing")
    if not 0.0 < energy <= 1.0:
        raise InvalidArgumentError(f"energy must be in (0, 1], got {energy}")
    total = s.sum()
    if total <= 0.0:
        raise DegenerateLayerError("all singular values are zero")
    cum = np.cumsum(s) / total
    # tolerance so energy=1.0 hits the last nonzero value despite rounding
    return int(np.argmax(cum >= energy - 1e-12)) + 1


def cumulative_energy(singular_values) -> np.ndarray:
    s = np.asarray(singular_values, dtype=np.float64)
    total = s.sum()
    if total <= 0.0:
        raise DegenerateLayerError("all singular values are zero")
    return np.cumsum(s) / total


@dataclass
class DecomposedLayer:
    """One linear layer split into embedding factor Q and pointwise factor R.

    ``q`` keeps the original spatial layout ((k,k,c,z) for conv, (in,z)
    for dense); ``r`` is the (z,n) matrix of the 1x1 factor.  The biases
    and normalization statistics start at the identity (zero bias, mean 0
    / var 1) and change only through :func:`fold_normalization`.
    """

    q: np.ndarray
    r: np.ndarray
    z: int
    q_bias: np.ndarray
    r_bias: np.ndarray
    norm_mean: np.ndarray
    norm_var: np.ndarray

    def q_matrix(self) -> np.ndarray:
        return self.q.reshape(-1, self.z)


def decompose_layer(layer: LayerSpec, energy: float) -> DecomposedLayer:
    """Truncated-SVD factorization of one conv/dense layer at the given energy."""
    if layer.kind not in ("conv", "dense"):
        raise InvalidArgumentError(
            f"can only decompose plain conv/dense layers, got {layer.kind!r}"
        )
    w = layer.weight_matrix().astype(np.float64)
    if not np.any(w):
        raise DegenerateLayerError(f"layer {layer.name!r} has all-zero weights")
    res = linalg.svd(w)
    z = estimate_rank(res.s, energy)
    q_mat, r = linalg.truncated_factorize(res, z)
    if layer.kind == "conv":
        q = q_mat.reshape(layer.k, layer.k, layer.in_channels, z)
    else:
        q = q_mat
    n = layer.out_channels
    r_bias = (
        layer.bias.astype(np.float64).copy() if layer.bias is not None else np.zeros(n)
    )
    return DecomposedLayer(
        q=q,
        r=r,
        z=z,
        q_bias=np.zeros(z),
        r_bias=r_bias,
        norm_mean=np.zeros(z),
        norm_var=np.ones(z),
    )


def fold_normalization(dec: DecomposedLayer, mean, var) -> DecomposedLayer:
    """Rescale the factors so the embedding output is (e - mean)/sqrt(var).

    The pointwise factor absorbs the inverse transform, so the layer's
    end-to-end output is unchanged: R <- sqrt(var)*R (per embedding
    channel) and r_bias <- r_bias + R^T mean.
    """
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != (dec.z,) or var.shape != (dec.z,):
        raise InvalidArgumentError(
            f"statistics must have length z={dec.z}, got {mean.shape} / {var.shape}"
        )
    var = np.maximum(var, VAR_EPS)
    std = np.sqrt(var)
    return DecomposedLayer(
        q=dec.q / std,                       # broadcasts over the trailing z axis
        r=dec.r * std[:, None],
        z=dec.z,
        q_bias=(dec.q_bias - mean) / std,
        r_bias=dec.r_bias + dec.r.T @ mean,
        norm_mean=mean.copy(),
        norm_var=var.copy(),
    )


@dataclass
class RankReport:
    """Per-layer singular spectrum, cumulative-energy curve, and chosen rank."""

    energy: float
    entries: list[dict] = field(default_factory=list)

    def add(self, name: str, singular_values: np.ndarray, z: int, n: int) -> None:
        self.entries.append({
            "name": name,
            "singular_values": [float(v) for v in singular_values],
            "cum_energy": [float(v) for v in cumulative_energy(singular_values)],
            "z": int(z),
            "n": int(n),
        })

    def entry(self, name: str) -> dict:
        for e in self.entries:
            if e["name"] == name:
                return e
        raise InvalidArgumentError(f"no rank entry for layer {name!r}")

    def to_json(self) -> str:
        payload = {"version": 1, "energy": self.energy, "layers": self.entries}
        return json.dumps(payload, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RankReport":
        payload = json.loads(text)
        rep = cls(energy=payload["energy"])
        rep.entries = payload["layers"]
        return rep


def _pair_layers(base: LayerSpec, dec: DecomposedLayer) -> tuple[LayerSpec, LayerSpec]:
    """Materialize a DecomposedLayer as (embed, pointwise) LayerSpec entries."""
    if base.kind == "conv":
        embed = LayerSpec(
            kind="embed_conv", name=f"{base.name}.embed",
            k=base.k, pad=base.pad, stride=base.stride,
            in_channels=base.in_channels, out_channels=dec.z,
            weight=dec.q.astype(np.float32), bias=dec.q_bias.astype(np.float32),
        )
        point = LayerSpec(
            kind="pointwise_conv", name=f"{base.name}.point",
            k=1, pad=0, stride=1,
            in_channels=dec.z, out_channels=base.out_channels, relu=base.relu,
            weight=dec.r.astype(np.float32).reshape(1, 1, dec.z, base.out_channels),
            bias=dec.r_bias.astype(np.float32),
        )
    else:
        embed = LayerSpec(
            kind="embed_dense", name=f"{base.name}.embed",
            in_channels=base.weight.shape[0], out_channels=dec.z,
            weight=dec.q.astype(np.float32), bias=dec.q_bias.astype(np.float32),
        )
        point = LayerSpec(
            kind="pointwise_dense", name=f"{base.name}.point",
            in_channels=dec.z, out_channels=base.out_channels, relu=base.relu,
            weight=dec.r.astype(np.float32), bias=dec.r_bias.astype(np.float32),
        )
    return embed, point


def decomposed_pairs(net: Network) -> list[tuple[int, int]]:
    """Indices of (embed, pointwise) layer pairs in a decomposed network."""
    pairs = []
    for i, layer in enumerate(net.layers):
        if layer.kind in ("embed_conv", "embed_dense"):
            if i + 1 >= len(net.layers) or not net.layers[i + 1].kind.startswith("pointwise_"):
                raise InvalidArgumentError(
                    f"embedding layer {layer.name!r} is not followed by its pointwise factor"
                )
            pairs.append((i, i + 1))
    return pairs


def canonicalize(net: Network) -> Network:
    """Fold batchnorm and fuse standalone ReLUs so only weighted/pool layers remain."""
    return fuse_standalone_relu(fold_batchnorm(net))


def _embedding_stats(net: Network, x: np.ndarray, embed_idx: list[int],
                     stat_batches: int, batch_size: int):
    """Per-channel mean/var of each embedding output over up to stat_batches batches.

    Moments accumulate as 64-bit (count, sum, sum of squares) per batch,
    so the result does not depend on batch order.
    """
    acc = {i: [0.0, None, None] for i in embed_idx}  # count, sum, sumsq
    n = x.shape[0]
    used = 0
    for start in range(0, n, batch_size):
        if used >= stat_batches:
            break
        _, trace = forward(net, x[start:start + batch_size], capture=embed_idx)
        for i in embed_idx:
            act = trace[i]
            flat = act.transpose(0, 2, 3, 1).reshape(-1, act.shape[1]) if act.ndim == 4 else act
            cnt, s, sq = acc[i]
            acc[i][0] = cnt + flat.shape[0]
            acc[i][1] = flat.sum(axis=0) if s is None else s + flat.sum(axis=0)
            acc[i][2] = (flat ** 2).sum(axis=0) if sq is None else sq + (flat ** 2).sum(axis=0)
        used += 1
    stats = {}
    for i in embed_idx:
        cnt, s, sq = acc[i]
        mean = s / cnt
        var = np.maximum(sq / cnt - mean ** 2, VAR_EPS)
        stats[i] = (mean, var)
    return stats


def decompose_network(
    net: Network,
    energy: float,
    x: np.ndarray,
    y: np.ndarray | None = None,
    stat_batches: int = 8,
    batch_size: int = 128,
    finetune_epochs: int = 0,
    finetune_lr: float = 0.01,
    seed: int = 0,
) -> tuple[Network, RankReport]:
    """Factorize every linear layer of a plain network and fold normalization.

    ``x`` supplies the batches for the embedding statistics; ``y`` is only
    needed when a short label-driven fine-tune of all factors is requested
    (finetune_epochs > 0).
    """
    if net.form != "plain":
        raise InvalidArgumentError(f"expected a plain-form network, got {net.form!r}")
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(net.input_shape):
        raise InvalidArgumentError(
            f"statistics data shape {x.shape} does not match network input "
            f"{tuple(net.input_shape)}"
        )
    src = canonicalize(net)
    report = RankReport(energy=energy)
    decomposed: dict[str, DecomposedLayer] = {}
    layers: list[LayerSpec] = []
    for layer in src.layers:
        if layer.kind in ("conv", "dense"):
            dec = decompose_layer(layer, energy)
            w = layer.weight_matrix().astype(np.float64)
            report.add(layer.name, linalg.svd(w).s, dec.z, layer.out_channels)
            decomposed[layer.name] = dec
            layers.extend(_pair_layers(layer, dec))
        elif layer.kind in WEIGHTED_KINDS:
            raise InvalidArgumentError(
                f"network already contains factor layer {layer.name!r}"
            )
        else:
            layers.append(layer)
    out = Network(layers=layers, name=src.name, input_shape=src.input_shape,
                  form="decomposed")

    # Short-term fine-tune on the raw factorization (orthonormal Q, W-scaled
    # R) — the balanced gradient scales there keep plain SGD stable; the
    # normalization below only exists to condition per-layer reconstruction.
    if finetune_epochs > 0:
        if y is None:
            raise InvalidArgumentError("fine-tuning requires labels")
        from .training import TrainConfig, train

        train(out, x, y, TrainConfig(lr=finetune_lr, epochs=finetune_epochs,
                                     batch=batch_size, seed=seed))

    embed_idx = [i for i, l in enumerate(out.layers) if l.kind in ("embed_conv", "embed_dense")]
    stats = _embedding_stats(out, x, embed_idx, stat_batches, batch_size)
    for i in embed_idx:
        embed, point = out.layers[i], out.layers[i + 1]
        base = embed.name.rsplit(".", 1)[0]
        dec = decomposed[base]
        dec = DecomposedLayer(
            q=embed.weight.astype(np.float64),
            r=point.weight_matrix().astype(np.float64),
            z=dec.z,
            q_bias=embed.bias.astype(np.float64),
            r_bias=point.bias.astype(np.float64),
            norm_mean=dec.norm_mean, norm_var=dec.norm_var,
        )
        mean, var = stats[i]
        folded = fold_normalization(dec, mean, var)
        embed.weight = folded.q.astype(np.float32)
        embed.bias = folded.q_bias.astype(np.float32)
        point.weight = (
            folded.r.reshape(point.weight.shape).astype(np.float32)
            if point.kind == "pointwise_conv" else folded.r.astype(np.float32)
        )
        point.bias = folded.r_bias.astype(np.float32)
    return out, report


def search_energy(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    start: float = 0.3,
    step: float = 0.05,
    stop: float = 0.9,
    max_drop: float = 0.02,
    finetune_epochs: int = 0,
    seed: int = 0,
):
    """Scan energies upward until decomposition costs at most max_drop accuracy.

    Returns (energy, decomposed net, report).  Falls back to the largest
    scanned energy when no candidate recovers the accuracy.
    """
    from .metrics import evaluate

    _, base_acc = evaluate(net, x, y)
    candidate = None
    for energy in np.arange(start, stop + 1e-9, step):
        energy = round(float(energy), 10)
        dec, report = decompose_network(
            net, energy, x, y,
            finetune_epochs=finetune_epochs, seed=seed,
        )
        _, acc = evaluate(dec, x, y)
        candidate = (energy, dec, report)
        if base_acc - acc <= max_drop:
            break
    return candidate
