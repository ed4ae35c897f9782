"""Minimal CNN representation and forward engine.

Tensors follow the (n, c, h, w) layout with row-major float32 storage;
the forward pass promotes to float64 for matrix products so equivalence
checks between algebraically equal networks hold to tight tolerances.
Convolution is realized as im2col + GEMM.  A conv weight of shape
(k, k, c, n) flattened row-major over its first three axes lines up with
the (ki, kj, channel) patch ordering produced by :func:`im2col`, so
``im2col(x) @ weight.reshape(k*k*c, n)`` is the convolution.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, UnsupportedStructureError

# Layer kinds.  conv/dense are the plain trainable layers; embed_*/
# pointwise_* are the two factors a decomposed layer splits into;
# batchnorm only exists before folding.
CONV_KINDS = ("conv", "embed_conv", "pointwise_conv")
DENSE_KINDS = ("dense", "embed_dense", "pointwise_dense")
WEIGHTED_KINDS = CONV_KINDS + DENSE_KINDS
KINDS = WEIGHTED_KINDS + ("maxpool", "relu", "softmax", "batchnorm")


@dataclass
class LayerSpec:
    kind: str
    name: str = ""
    k: int = 0
    pad: int = 0
    stride: int = 1
    in_channels: int = 0
    out_channels: int = 0
    relu: bool = False          # fused activation applied after the linear op
    weight: np.ndarray | None = None   # conv: (k,k,c,n) f32; dense: (in_dim,out) f32
    bias: np.ndarray | None = None
    # batchnorm statistics (inference form)
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    eps: float = 1e-5

    def weight_matrix(self) -> np.ndarray:
        """Weight reshaped to 2-D: (k*k*c, n) for conv kinds, as-is for dense."""
        if self.kind in CONV_KINDS:
            k, c, n = self.k, self.in_channels, self.out_channels
            return self.weight.reshape(k * k * c, n)
        return self.weight


@dataclass
class Network:
    layers: list[LayerSpec]
    name: str = "net"
    input_shape: tuple[int, int, int] = (3, 16, 16)  # (c, h, w)
    form: str = "plain"  # plain | decomposed | slim
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def layer_by_name(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise InvalidArgumentError(f"no layer named {name!r}")


def conv_output_hw(h: int, w: int, k: int, pad: int, stride: int) -> tuple[int, int]:
    if k > h + 2 * pad or k > w + 2 * pad:
        raise InvalidArgumentError(
            f"kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise InvalidArgumentError("convolution output would be empty")
    return ho, wo


def im2col(x: np.ndarray, k: int, pad: int, stride: int) -> np.ndarray:
    """Unfold (n, c, h, w) into patch rows of shape (n*ho*wo, k*k*c).

    Row (b, i, j) holds the zero-padded k x k x c patch whose top-left
    corner is (i*stride, j*stride) in the padded image; within a row the
    entries are ordered kernel-position major, channel minor, matching
    ``weight.reshape(k*k*c, n)``.
    """
    n, c, h, w = x.shape
    ho, wo = conv_output_hw(h, w, k, pad, stride)
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # windows: (n, c, h', w', k, k) -> stride slice -> (n, ho, wo, k, k, c)
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 4, 5, 1)
    return cols.reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, x_shape, k: int, pad: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = x_shape
    ho, wo = conv_output_hw(h, w, k, pad, stride)
    blocks = cols.reshape(n, ho, wo, k, k, c).transpose(0, 5, 3, 4, 1, 2)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            padded[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                blocks[:, :, ki, kj]
            )
    if pad > 0:
        return padded[:, :, pad:pad + h, pad:pad + w]
    return padded


def maxpool(x: np.ndarray, k: int, stride: int):
    """Max pooling; returns the pooled map and flat argmax indices for backprop."""
    n, c, h, w = x.shape
    if k > h or k > w:
        raise InvalidArgumentError(f"pool window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=4)  # first max wins: deterministic
    out = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return out, idx


def maxpool_backward(dy: np.ndarray, idx: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = dy.shape[2], dy.shape[3]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ki = idx // k
    kj = idx % k
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy[None, None] * stride + ki
    cols = ox[None, None] * stride + kj
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    np.add.at(dx, (bidx, cidx, rows, cols), dy)
    return dx


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _flatten(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) if x.ndim != 2 else x


def layer_forward(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Apply a single layer (fused ReLU included) to a float64 activation."""
    kind = layer.kind
    if kind in CONV_KINDS:
        n = x.shape[0]
        if x.ndim != 4 or x.shape[1] != layer.in_channels:
            raise InvalidArgumentError(
                f"layer {layer.name!r} expects {layer.in_channels} channels, "
                f"got input shape {x.shape}"
            )
        ho, wo = conv_output_hw(x.shape[2], x.shape[3], layer.k, layer.pad, layer.stride)
        cols = im2col(x, layer.k, layer.pad, layer.stride)
        y = cols @ layer.weight_matrix().astype(np.float64)
        if layer.bias is not None:
            y = y + layer.bias.astype(np.float64)
        y = y.reshape(n, ho, wo, layer.out_channels).transpose(0, 3, 1, 2)
    elif kind in DENSE_KINDS:
        flat = _flatten(x)
        w = layer.weight.astype(np.float64)
        if flat.shape[1] != w.shape[0]:
            raise InvalidArgumentError(
                f"layer {layer.name!r} expects {w.shape[0]} inputs, got {flat.shape[1]}"
            )
        y = flat @ w
        if layer.bias is not None:
            y = y + layer.bias.astype(np.float64)
    elif kind == "maxpool":
        y, _ = maxpool(x, layer.k, layer.stride)
    elif kind == "relu":
        y = np.maximum(x, 0.0)
    elif kind == "softmax":
        y = _softmax(_flatten(x))
    elif kind == "batchnorm":
        scale = (layer.gamma / np.sqrt(layer.running_var + layer.eps)).astype(np.float64)
        shift = (layer.beta - layer.running_mean * (layer.gamma / np.sqrt(layer.running_var + layer.eps))).astype(np.float64)
        if x.ndim == 4:
            y = x * scale[None, :, None, None] + shift[None, :, None, None]
        else:
            y = x * scale[None, :] + shift[None, :]
    else:
        raise UnsupportedStructureError(f"unknown layer kind {kind!r}")
    if layer.relu and kind in WEIGHTED_KINDS:
        y = np.maximum(y, 0.0)
    return y


def forward(net: Network, batch: np.ndarray, capture=()):
    """Run the network on a batch, optionally capturing activations.

    ``capture`` is a collection of layer indices whose outputs (after any
    fused ReLU) are recorded.  Returns (output, trace) where trace maps
    layer index to the captured float64 activation.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise InvalidArgumentError(f"batch must be 4-D (n,c,h,w), got {batch.shape}")
    if tuple(batch.shape[1:]) != tuple(net.input_shape):
        raise InvalidArgumentError(
            f"batch shape {tuple(batch.shape[1:])} does not match network "
            f"input shape {tuple(net.input_shape)}"
        )
    capture = set(capture)
    x = batch.astype(np.float64)
    trace: dict[int, np.ndarray] = {}
    for i, layer in enumerate(net.layers):
        x = layer_forward(layer, x)
        if i in capture:
            trace[i] = x
    return x, trace


def output_shape(layer: LayerSpec, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Shape (c, h, w) a layer emits for a given input shape; dense -> (out, 1, 1)."""
    c, h, w = in_shape
    if layer.kind in CONV_KINDS:
        if c != layer.in_channels:
            raise InvalidArgumentError(
                f"layer {layer.name!r}: expected {layer.in_channels} in-channels, got {c}"
            )
        ho, wo = conv_output_hw(h, w, layer.k, layer.pad, layer.stride)
        return (layer.out_channels, ho, wo)
    if layer.kind in DENSE_KINDS:
        flat = c * h * w
        if layer.weight is not None and layer.weight.shape[0] != flat:
            raise InvalidArgumentError(
                f"layer {layer.name!r}: dense weight expects {layer.weight.shape[0]} "
                f"inputs but upstream provides {flat}"
            )
        return (layer.out_channels, 1, 1)
    if layer.kind == "maxpool":
        if layer.k > h or layer.k > w:
            raise InvalidArgumentError(f"pool window {layer.k} larger than {h}x{w}")
        return (c, (h - layer.k) // layer.stride + 1, (w - layer.k) // layer.stride + 1)
    if layer.kind in ("relu", "batchnorm"):
        return (c, h, w)
    if layer.kind == "softmax":
        return (c * h * w, 1, 1)
    raise UnsupportedStructureError(f"unknown layer kind {layer.kind!r}")


def walk_shapes(net: Network) -> list[tuple[int, int, int]]:
    """Input shape of every layer in order (validates adjacency)."""
    shapes = []
    shape = tuple(net.input_shape)
    for layer in net.layers:
        shapes.append(shape)
        shape = output_shape(layer, shape)
    return shapes


def validate_network(net: Network) -> None:
    """Check channel adjacency and that the net ends in a single classifier."""
    walk_shapes(net)
    weighted = [l for l in net.layers if l.kind in WEIGHTED_KINDS]
    if not weighted:
        raise UnsupportedStructureError("network has no weighted layers")
    tail = [l for l in net.layers if l.kind != "softmax"][-1]
    if tail.kind not in DENSE_KINDS or tail.relu:
        raise UnsupportedStructureError(
            "network must end with a dense classifier (no fused ReLU), "
            f"found {tail.kind!r}"
        )


def fold_batchnorm(net: Network) -> Network:
    """Absorb every batchnorm into the preceding conv/dense layer.

    The folded layer computes scale * (Wx + b - mean) + beta with
    scale = gamma / sqrt(var + eps), which leaves outputs unchanged.
    """
    out = net.copy()
    folded: list[LayerSpec] = []
    for layer in out.layers:
        if layer.kind != "batchnorm":
            folded.append(layer)
            continue
        if not folded or folded[-1].kind not in WEIGHTED_KINDS or folded[-1].relu:
            raise UnsupportedStructureError(
                f"batchnorm {layer.name!r} is not directly preceded by a linear layer"
            )
        prev = folded[-1]
        scale = layer.gamma / np.sqrt(layer.running_var + layer.eps)
        w = prev.weight.astype(np.float64)
        w = w * scale.astype(np.float64)  # broadcasts over the trailing out-channel axis
        b = prev.bias.astype(np.float64) if prev.bias is not None else np.zeros(prev.out_channels)
        b = (b - layer.running_mean) * scale + layer.beta
        prev.weight = w.astype(np.float32)
        prev.bias = b.astype(np.float32)
    out.layers = folded
    return out


def fuse_standalone_relu(net: Network) -> Network:
    """Merge a standalone relu layer into the preceding linear layer's flag."""
    out = net.copy()
    layers: list[LayerSpec] = []
    for layer in out.layers:
        if (
            layer.kind == "relu"
            and layers
            and layers[-1].kind in WEIGHTED_KINDS
            and not layers[-1].relu
        ):
            layers[-1].relu = True
            continue
        layers.append(layer)
    out.layers = layers
    return out
