"""Merging factor pairs back into single layers and stripping dead channels.

Because every masked channel's pointwise column and bias were zeroed
before this stage, removal is exactly output-preserving: the slim network
computes the same function as the masked two-factor pipeline, only on
fewer channels and at the original depth.
"""

from __future__ import annotations

import numpy as np

from .decompose import decomposed_pairs
from .errors import InvalidArgumentError
from .netcore import (
    CONV_KINDS,
    DENSE_KINDS,
    LayerSpec,
    Network,
    forward,
    walk_shapes,
)


def recompose_layer(embed: LayerSpec, point: LayerSpec) -> LayerSpec:
    """Merge an (embedding, pointwise) factor pair into one plain layer.

    Merged weight is the matrix product of the reshaped factors; merged
    bias is R^T q_bias + r_bias, which reproduces the pipeline output:
    R^T (Q^T y + q_bias) + r_bias = (QR)^T y + (R^T q_bias + r_bias).
    """
    if embed.out_channels != point.in_channels:
        raise InvalidArgumentError(
            f"factor widths disagree: embedding emits {embed.out_channels}, "
            f"pointwise expects {point.in_channels}"
        )
    q = embed.weight_matrix().astype(np.float64)
    r = point.weight_matrix().astype(np.float64)
    w = q @ r
    q_bias = (
        embed.bias.astype(np.float64) if embed.bias is not None
        else np.zeros(embed.out_channels)
    )
    r_bias = (
        point.bias.astype(np.float64) if point.bias is not None
        else np.zeros(point.out_channels)
    )
    bias = r.T @ q_bias + r_bias
    base = embed.name.rsplit(".", 1)[0]
    if embed.kind == "embed_conv":
        return LayerSpec(
            kind="conv", name=base, k=embed.k, pad=embed.pad, stride=embed.stride,
            in_channels=embed.in_channels, out_channels=point.out_channels,
            relu=point.relu,
            weight=w.reshape(embed.k, embed.k, embed.in_channels,
                             point.out_channels).astype(np.float32),
            bias=bias.astype(np.float32),
        )
    return LayerSpec(
        kind="dense", name=base,
        in_channels=embed.in_channels, out_channels=point.out_channels,
        relu=point.relu,
        weight=w.astype(np.float32), bias=bias.astype(np.float32),
    )


def recompose_network(net: Network) -> Network:
    """Merge every factor pair of a decomposed network; masks are carried over."""
    if net.form != "decomposed":
        raise InvalidArgumentError(f"expected a decomposed network, got {net.form!r}")
    pair_starts = {ei: pi for ei, pi in decomposed_pairs(net)}
    layers: list[LayerSpec] = []
    skip = set()
    for i, layer in enumerate(net.layers):
        if i in skip:
            continue
        if i in pair_starts:
            pi = pair_starts[i]
            layers.append(recompose_layer(layer, net.layers[pi]))
            skip.add(pi)
        else:
            layers.append(layer)
    return Network(layers=layers, name=net.name, input_shape=net.input_shape,
                   form="plain", masks=dict(net.masks))


def strip_pruned(net: Network, masks: dict | None = None) -> Network:
    """Remove masked output channels and the matching input slices downstream.

    Works on merged (plain-form) networks; the classifier's outputs must
    never be masked.  Returns a slim-form network with provenance masks.
    """
    if masks is None:
        masks = net.masks
    out = net.copy()
    out.masks = {k: np.asarray(v, dtype=np.float32).copy() for k, v in masks.items()}
    shapes = walk_shapes(out)
    weighted = [i for i, l in enumerate(out.layers)
                if l.kind in CONV_KINDS + DENSE_KINDS]
    names = [out.layers[i].name for i in weighted]
    for name in masks:
        if name not in names:
            raise InvalidArgumentError(f"mask names unknown layer {name!r}")
        if name == names[-1]:
            raise InvalidArgumentError("classifier outputs cannot be masked")
    for pos, li in enumerate(weighted[:-1]):
        layer = out.layers[li]
        if layer.name not in masks:
            continue
        mask = np.asarray(masks[layer.name])
        if mask.shape != (layer.out_channels,):
            raise InvalidArgumentError(
                f"mask for {layer.name!r} has length {mask.shape}, "
                f"layer emits {layer.out_channels} channels"
            )
        keep = mask != 0
        if not keep.any():
            raise InvalidArgumentError(f"mask for {layer.name!r} keeps no channels")
        layer.weight = (
            layer.weight[..., keep] if layer.kind in CONV_KINDS
            else layer.weight[:, keep]
        )
        layer.bias = layer.bias[keep]
        layer.out_channels = int(keep.sum())

        ci = weighted[pos + 1]
        consumer = out.layers[ci]
        if consumer.kind in CONV_KINDS:
            consumer.weight = consumer.weight[:, :, keep, :]
            consumer.in_channels = int(keep.sum())
        else:
            c, h, w = shapes[ci]
            per_channel = h * w
            blocks = consumer.weight.reshape(c, per_channel, consumer.out_channels)
            consumer.weight = blocks[keep].reshape(-1, consumer.out_channels)
            consumer.in_channels = int(keep.sum())
    out.form = "slim"
    return out


def verify_equivalence(net_a: Network, net_b: Network, data: np.ndarray) -> float:
    """Max absolute output deviation between two networks on the same batch."""
    if tuple(net_a.input_shape) != tuple(net_b.input_shape):
        raise InvalidArgumentError(
            f"input shapes differ: {net_a.input_shape} vs {net_b.input_shape}"
        )
    out_a, _ = forward(net_a, data)
    out_b, _ = forward(net_b, data)
    if out_a.shape != out_b.shape:
        raise InvalidArgumentError(
            f"output shapes differ: {out_a.shape} vs {out_b.shape}"
        )
    return float(np.abs(out_a - out_b).max())
