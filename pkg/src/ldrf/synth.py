"""Synthetic datasets and reference network builders for desk-scale experiments.

Images are class-conditional smooth random fields: each class owns a
low-frequency prototype (coarse Gaussian grid, bilinearly upsampled);
samples are the prototype scaled by a separation factor, randomly shifted
by a few pixels, plus white noise.  The shifts force class evidence to
spread across many channels, so channel pruning actually hurts an
untrained-for-it network — which is what the pruning comparison needs.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .netcore import (
    CONV_KINDS,
    DENSE_KINDS,
    LayerSpec,
    Network,
    forward,
    validate_network,
)


def _bilinear_upsample(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    """(c, gh, gw) -> (c, h, w) by separable linear interpolation."""
    c, gh, gw = coarse.shape
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = coarse[:, y0][:, :, x0] * (1 - fx) + coarse[:, y0][:, :, x1] * fx
    bot = coarse[:, y1][:, :, x0] * (1 - fx) + coarse[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def gen_synthetic(
    seed: int,
    samples: int,
    classes: int = 4,
    shape: tuple[int, int, int] = (3, 16, 16),
    separation: float = 1.0,
    noise: float = 1.0,
    jitter: int = 2,
    grid: int = 4,
):
    """Balanced labelled image set; returns (x float32 (n,c,h,w), y int64)."""
    if classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {classes}")
    if samples < classes or samples % classes != 0:
        raise InvalidArgumentError(
            f"sample count {samples} must be a positive multiple of {classes} "
            f"classes for exactly balanced labels"
        )
    c, h, w = shape
    if c < 1 or h < 2 or w < 2:
        raise InvalidArgumentError(f"invalid image shape {shape}")
    rng = np.random.default_rng(seed)
    protos = np.stack([
        _bilinear_upsample(rng.standard_normal((c, grid, grid)), h, w)
        for _ in range(classes)
    ])
    protos /= np.sqrt((protos ** 2).mean(axis=(1, 2, 3), keepdims=True))
    per = samples // classes
    y = np.repeat(np.arange(classes), per)
    x = separation * protos[y]
    if jitter > 0:
        shifts = rng.integers(-jitter, jitter + 1, size=(samples, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (int(dy), int(dx)), axis=(1, 2))
    x = x + noise * rng.standard_normal(x.shape)
    order = rng.permutation(samples)
    return x[order].astype(np.float32), y[order].astype(np.int64)


def _he_conv(rng, k, c, n):
    return (rng.standard_normal((k, k, c, n)) * np.sqrt(2.0 / (k * k * c))).astype(np.float32)


def _he_dense(rng, d_in, d_out):
    return (rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)).astype(np.float32)


def build_toy_net(
    seed: int = 0,
    input_shape: tuple[int, int, int] = (3, 16, 16),
    classes: int = 4,
    widths: tuple[int, int, int] = (16, 32, 32),
) -> Network:
    """Three 3x3 conv layers (each pooled) and a dense classifier, He-initialized."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    w1, w2, w3 = widths
    layers = [
        LayerSpec(kind="conv", name="conv1", k=3, pad=1, stride=1,
                  in_channels=c, out_channels=w1, relu=True,
                  weight=_he_conv(rng, 3, c, w1), bias=np.zeros(w1, np.float32)),
        LayerSpec(kind="maxpool", name="pool1", k=2, stride=2),
        LayerSpec(kind="conv", name="conv2", k=3, pad=1, stride=1,
                  in_channels=w1, out_channels=w2, relu=True,
                  weight=_he_conv(rng, 3, w1, w2), bias=np.zeros(w2, np.float32)),
        LayerSpec(kind="maxpool", name="pool2", k=2, stride=2),
        LayerSpec(kind="conv", name="conv3", k=3, pad=1, stride=1,
                  in_channels=w2, out_channels=w3, relu=True,
                  weight=_he_conv(rng, 3, w2, w3), bias=np.zeros(w3, np.float32)),
        LayerSpec(kind="maxpool", name="pool3", k=2, stride=2),
    ]
    flat = w3 * (h // 8) * (w // 8)
    layers.append(
        LayerSpec(kind="dense", name="fc", in_channels=flat, out_channels=classes,
                  weight=_he_dense(rng, flat, classes),
                  bias=np.zeros(classes, np.float32))
    )
    net = Network(layers=layers, name="toy", input_shape=input_shape, form="plain")
    validate_network(net)
    return net


def equalize_scales(net: Network, x: np.ndarray, target_rms: float = 1.0) -> Network:
    """Rescale hidden layers so each one's activations have the target RMS.

    ReLU and max-pooling commute with positive scaling, so dividing a
    hidden layer's weight and bias by its activation RMS and multiplying
    the consumer's matching input slice back preserves the network
    function exactly while pinning every hidden activation to a common
    scale.  Networks trained without normalization layers drift to wildly
    uneven per-layer scales, which starves single-learning-rate descent;
    this restores the conditioning a normalized network would have.
    """
    if target_rms <= 0:
        raise InvalidArgumentError(f"target_rms must be positive, got {target_rms}")
    out = net.copy()
    weighted = [i for i, l in enumerate(out.layers)
                if l.kind in CONV_KINDS + DENSE_KINDS]
    _, trace = forward(out, x, capture=weighted[:-1])
    for pos, li in enumerate(weighted[:-1]):
        layer = out.layers[li]
        if not layer.relu:
            continue
        rms = float(np.sqrt((trace[li] ** 2).mean()))
        if rms <= 0:
            raise InvalidArgumentError(
                f"layer {layer.name!r} is silent on the calibration batch"
            )
        s = np.float32(rms / target_rms)
        layer.weight = layer.weight / s
        layer.bias = layer.bias / s
        consumer = out.layers[weighted[pos + 1]]
        consumer.weight = consumer.weight * s
    return out


VGG9_CONV_CHANNELS = (64, 64, 128, 128, 256, 256)
VGG9_CONV_NAMES = ("conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2")


def make_vgg9_shapes(
    conv_channels=VGG9_CONV_CHANNELS,
    input_shape: tuple[int, int, int] = (3, 32, 32),
    classes: int = 10,
) -> Network:
    """Shape-only VGG-9 (weights omitted) for cost accounting.

    Six 3x3 same-pad convs with 2x2 pooling after each pair, then a small
    dense stack.  ``conv_channels`` may carry pruned keep counts.
    """
    if len(conv_channels) != 6:
        raise InvalidArgumentError("VGG-9 needs exactly 6 conv channel counts")
    c, h, w = input_shape
    layers = []
    prev = c
    for i, n in enumerate(conv_channels):
        layers.append(LayerSpec(
            kind="conv", name=VGG9_CONV_NAMES[i], k=3, pad=1, stride=1,
            in_channels=prev, out_channels=n, relu=True,
        ))
        prev = n
        if i % 2 == 1:
            layers.append(LayerSpec(kind="maxpool", name=f"pool{i // 2 + 1}",
                                    k=2, stride=2))
    spatial = (h // 8) * (w // 8)
    layers.append(LayerSpec(kind="dense", name="fc1",
                            in_channels=prev * spatial, out_channels=256, relu=True))
    layers.append(LayerSpec(kind="dense", name="fc2",
                            in_channels=256, out_channels=256, relu=True))
    layers.append(LayerSpec(kind="dense", name="fc3",
                            in_channels=256, out_channels=classes))
    return Network(layers=layers, name="vgg9", input_shape=input_shape, form="plain")
