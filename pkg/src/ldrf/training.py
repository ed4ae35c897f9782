"""Plain SGD training for the small CNNs used in experiments.

This is a float32 fast path: the contract-checked forward lives in
:mod:`ldrf.netcore`; here we trade a little precision for speed because
training only needs stochastic gradients.  Backprop mirrors the forward
exactly: conv layers differentiate through the im2col GEMM, pooling
routes gradients through cached argmax indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedStructureError
from .netcore import (
    CONV_KINDS,
    DENSE_KINDS,
    WEIGHTED_KINDS,
    Network,
    col2im,
    conv_output_hw,
    im2col,
    maxpool,
    maxpool_backward,
)


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    max_grad_norm: float = 10.0  # global-norm clip; factorized nets are stiff
    verbose: bool = False


def forward_cached(net: Network, x: np.ndarray):
    """Float32 forward pass that keeps what backward needs per layer."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    caches = []
    for layer in net.layers:
        kind = layer.kind
        if kind in CONV_KINDS:
            n = x.shape[0]
            ho, wo = conv_output_hw(x.shape[2], x.shape[3], layer.k, layer.pad, layer.stride)
            cols = im2col(x, layer.k, layer.pad, layer.stride)
            y = cols @ layer.weight_matrix()
            if layer.bias is not None:
                y = y + layer.bias
            y = y.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
            if layer.relu:
                y = np.maximum(y, 0.0)
            caches.append({"x_shape": x.shape, "cols": cols, "out": y})
        elif kind in DENSE_KINDS:
            flat = x.reshape(x.shape[0], -1)
            y = flat @ layer.weight
            if layer.bias is not None:
                y = y + layer.bias
            if layer.relu:
                y = np.maximum(y, 0.0)
            caches.append({"x_shape": x.shape, "flat": flat, "out": y})
        elif kind == "maxpool":
            y, idx = maxpool(x, layer.k, layer.stride)
            caches.append({"x_shape": x.shape, "idx": idx})
        elif kind == "relu":
            y = np.maximum(x, 0.0)
            caches.append({"out": y})
        elif kind == "batchnorm":
            scale = (layer.gamma / np.sqrt(layer.running_var + layer.eps)).astype(np.float32)
            shift = (layer.beta - layer.running_mean * scale).astype(np.float32)
            if x.ndim == 4:
                y = x * scale[None, :, None, None] + shift[None, :, None, None]
            else:
                y = x * scale[None, :] + shift[None, :]
            caches.append({"scale": scale, "ndim": x.ndim})
        elif kind == "softmax":
            raise UnsupportedStructureError(
                "softmax layers are not trained directly; train on logits"
            )
        else:
            raise UnsupportedStructureError(f"unknown layer kind {kind!r}")
        x = y
    return x, caches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    eps = np.finfo(p.dtype).tiny
    loss = float(-np.log(p[np.arange(n), labels] + eps).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / np.float32(n)


def backward(net: Network, caches, dout: np.ndarray):
    """Backprop through all layers; returns {layer_index: {"weight": dW, "bias": db}}."""
    grads: dict[int, dict[str, np.ndarray]] = {}
    dy = dout
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        kind = layer.kind
        if kind in CONV_KINDS:
            if layer.relu:
                dy = dy * (cache["out"] > 0)
            n, _, ho, wo = dy.shape
            dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, layer.out_channels)
            dw = cache["cols"].T @ dy_mat
            grads[i] = {
                "weight": dw.reshape(layer.weight.shape),
                "bias": dy_mat.sum(axis=0),
            }
            dcols = dy_mat @ layer.weight_matrix().T
            dy = col2im(dcols, cache["x_shape"], layer.k, layer.pad, layer.stride)
        elif kind in DENSE_KINDS:
            if layer.relu:
                dy = dy * (cache["out"] > 0)
            grads[i] = {
                "weight": cache["flat"].T @ dy,
                "bias": dy.sum(axis=0),
            }
            dy = (dy @ layer.weight.T).reshape(cache["x_shape"])
        elif kind == "maxpool":
            dy = maxpool_backward(dy, cache["idx"], cache["x_shape"], layer.k, layer.stride)
        elif kind == "relu":
            dy = dy * (cache["out"] > 0)
        elif kind == "batchnorm":
            scale = cache["scale"]
            dy = dy * (scale[None, :, None, None] if cache["ndim"] == 4 else scale[None, :])
        else:  # pragma: no cover - forward already rejects these
            raise UnsupportedStructureError(f"unknown layer kind {kind!r}")
    return grads


def predict(net: Network, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Float32 batched logits (no softmax)."""
    outs = []
    for start in range(0, x.shape[0], batch):
        logits, _ = forward_cached(net, x[start:start + batch])
        outs.append(logits)
    return np.concatenate(outs, axis=0)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    return float((predict(net, x, batch).argmax(axis=1) == y).mean())


def train(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> list[dict]:
    """SGD with momentum and linear LR decay, in place.  Returns epoch history."""
    rng = np.random.default_rng(cfg.seed)
    x = np.ascontiguousarray(x, dtype=np.float32)
    y = np.asarray(y)
    n = x.shape[0]
    velocity: dict[int, dict[str, np.ndarray]] = {}
    steps_per_epoch = max(1, (n + cfg.batch - 1) // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            logits, caches = forward_cached(net, x[idx])
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            grads = backward(net, caches, dlogits)
            if cfg.max_grad_norm:
                total = np.sqrt(sum(
                    float((g["weight"] ** 2).sum() + (g["bias"] ** 2).sum())
                    for g in grads.values()
                ))
                if total > cfg.max_grad_norm:
                    scale = np.float32(cfg.max_grad_norm / total)
                    for g in grads.values():
                        g["weight"] *= scale
                        g["bias"] *= scale
            lr = cfg.lr * max(0.02, 1.0 - step / max(1, total_steps))
            for i, g in grads.items():
                layer = net.layers[i]
                vel = velocity.setdefault(i, {
                    "weight": np.zeros_like(layer.weight),
                    "bias": np.zeros_like(layer.bias),
                })
                gw = g["weight"] + cfg.weight_decay * layer.weight
                vel["weight"] = cfg.momentum * vel["weight"] - lr * gw
                layer.weight += vel["weight"]
                vel["bias"] = cfg.momentum * vel["bias"] - lr * g["bias"]
                layer.bias += vel["bias"]
            epoch_loss += loss * len(idx)
            seen += len(idx)
            step += 1
        rec = {"epoch": epoch, "loss": epoch_loss / seen}
        history.append(rec)
        if cfg.verbose:
            print(f"epoch {epoch:3d}  loss {rec['loss']:.4f}")
    for layer in net.layers:
        if layer.kind in WEIGHTED_KINDS:
            layer.weight = layer.weight.astype(np.float32)
            layer.bias = layer.bias.astype(np.float32)
    return history
