"""Factor merging, dead-channel removal, and output-equivalence checking."""

import numpy as np
import pytest

from ldrf.decompose import decompose_network, decomposed_pairs
from ldrf.errors import InvalidArgumentError
from ldrf.netcore import LayerSpec, forward
from ldrf.recompose import (
    recompose_layer,
    recompose_network,
    strip_pruned,
    verify_equivalence,
)
from ldrf.synth import build_toy_net, gen_synthetic
from ldrf.training import TrainConfig, train


def toy_setup(seed=0, classes=4):
    x, y = gen_synthetic(seed, 160, classes=classes, shape=(2, 8, 8),
                         separation=1.5, noise=0.8)
    net = build_toy_net(seed=seed, input_shape=(2, 8, 8), classes=classes,
                        widths=(4, 6, 6))
    train(net, x, y, TrainConfig(lr=0.05, epochs=6, batch=32, seed=seed))
    return net, x, y


def test_recompose_layer_dense_hand_case():
    embed = LayerSpec(kind="embed_dense", name="fc.embed",
                      in_channels=2, out_channels=2,
                      weight=np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32),
                      bias=np.array([1.0, -1.0], dtype=np.float32))
    point = LayerSpec(kind="pointwise_dense", name="fc.point",
                      in_channels=2, out_channels=2,
                      weight=np.array([[0.5, 1.0], [2.0, -1.0]], dtype=np.float32),
                      bias=np.array([10.0, 20.0], dtype=np.float32))
    merged = recompose_layer(embed, point)
    assert merged.kind == "dense"
    assert merged.name == "fc"
    # W = Q R; bias = R^T q_bias + r_bias
    np.testing.assert_allclose(merged.weight, [[4.5, -1.0], [9.5, -1.0]])
    np.testing.assert_allclose(merged.bias, [8.5, 22.0])


def test_recompose_layer_conv_carries_geometry():
    rng = np.random.default_rng(0)
    embed = LayerSpec(kind="embed_conv", name="conv2.embed", k=3, pad=1, stride=1,
                      in_channels=2, out_channels=3,
                      weight=rng.normal(size=(3, 3, 2, 3)).astype(np.float32),
                      bias=rng.normal(size=3).astype(np.float32))
    point = LayerSpec(kind="pointwise_conv", name="conv2.point", k=1,
                      in_channels=3, out_channels=4, relu=True,
                      weight=rng.normal(size=(1, 1, 3, 4)).astype(np.float32),
                      bias=rng.normal(size=4).astype(np.float32))
    merged = recompose_layer(embed, point)
    assert merged.kind == "conv"
    assert (merged.k, merged.pad, merged.stride) == (3, 1, 1)
    assert merged.relu is True
    assert merged.weight.shape == (3, 3, 2, 4)
    q = embed.weight_matrix().astype(np.float64)
    r = point.weight_matrix().astype(np.float64)
    np.testing.assert_allclose(merged.weight_matrix(), q @ r, rtol=1e-6, atol=1e-6)


def test_recompose_layer_width_mismatch():
    embed = LayerSpec(kind="embed_dense", name="a.embed", in_channels=2,
                      out_channels=3, weight=np.zeros((2, 3), dtype=np.float32),
                      bias=np.zeros(3, dtype=np.float32))
    point = LayerSpec(kind="pointwise_dense", name="a.point", in_channels=4,
                      out_channels=2, weight=np.zeros((4, 2), dtype=np.float32),
                      bias=np.zeros(2, dtype=np.float32))
    with pytest.raises(InvalidArgumentError, match="widths"):
        recompose_layer(embed, point)


def test_recompose_network_function_preserving():
    net, x, y = toy_setup()
    dec, _ = decompose_network(net, 0.9, x)
    merged = recompose_network(dec)
    assert merged.form == "plain"
    assert len(merged.layers) == len(net.layers)
    assert [l.name for l in merged.layers] == [l.name for l in net.layers]
    assert [l.kind for l in merged.layers] == [l.kind for l in net.layers]
    assert verify_equivalence(dec, merged, x[:48]) < 1e-4


def test_recompose_network_requires_decomposed_form():
    net, _, _ = toy_setup(1)
    with pytest.raises(InvalidArgumentError, match="decomposed"):
        recompose_network(net)


def masked_setup(seed=2):
    """Decomposed toy net with hand-zeroed channels and matching masks."""
    net, x, y = toy_setup(seed)
    dec, _ = decompose_network(net, 0.5, x)
    pairs = decomposed_pairs(dec)
    bases = [dec.layers[ei].name.rsplit(".", 1)[0] for ei, pi in pairs]
    drops = {bases[0]: [1, 3], bases[1]: [0], bases[2]: [5]}
    for (ei, pi), base in zip(pairs, bases):
        if base not in drops:
            continue
        point = dec.layers[pi]
        mask = np.ones(point.out_channels, dtype=np.float32)
        mask[drops[base]] = 0.0
        dead = mask == 0
        point.weight[..., dead] = 0.0
        point.bias[dead] = 0.0
        dec.masks[base] = mask
    return dec, drops, bases, x


def test_strip_is_exactly_output_preserving():
    dec, drops, bases, x = masked_setup()
    merged = recompose_network(dec)
    slim = strip_pruned(merged)
    assert slim.form == "slim"
    assert verify_equivalence(merged, slim, x[:64]) < 1e-6
    assert verify_equivalence(dec, slim, x[:64]) < 1e-4


def test_strip_channel_bookkeeping():
    dec, drops, bases, x = masked_setup()
    merged = recompose_network(dec)
    widths = {l.name: l.out_channels for l in merged.layers
              if l.kind in ("conv", "dense")}
    slim = strip_pruned(merged)
    by_name = {l.name: l for l in slim.layers}
    for base, dropped in drops.items():
        assert by_name[base].out_channels == widths[base] - len(dropped)
    # consumers lost the matching input slices: conv after conv, dense after conv
    assert by_name[bases[1]].in_channels == widths[bases[0]] - len(drops[bases[0]])
    assert by_name[bases[2]].in_channels == widths[bases[1]] - len(drops[bases[1]])
    fc = by_name[bases[3]]
    per_channel = fc.weight.shape[0] // by_name[bases[2]].out_channels
    assert fc.weight.shape[0] == (widths[bases[2]] - len(drops[bases[2]])) * per_channel
    # provenance masks survive on the slim network
    assert set(slim.masks) == set(drops)
    out, _ = forward(slim, x[:8])
    assert out.shape == (8, widths[bases[3]])


def test_strip_validation():
    dec, drops, bases, x = masked_setup(3)
    merged = recompose_network(dec)
    with pytest.raises(InvalidArgumentError, match="unknown layer"):
        strip_pruned(merged, {"nope": np.ones(4)})
    with pytest.raises(InvalidArgumentError, match="classifier"):
        strip_pruned(merged, {bases[-1]: np.ones(4)})
    with pytest.raises(InvalidArgumentError, match="length"):
        strip_pruned(merged, {bases[0]: np.ones(3)})
    with pytest.raises(InvalidArgumentError, match="keeps no channels"):
        strip_pruned(merged, {bases[0]: np.zeros(4)})


def test_verify_equivalence_reports_deviation_and_checks_shapes():
    net, x, _ = toy_setup(4)
    bumped = net.copy()
    bumped.layers[-1].bias = bumped.layers[-1].bias + np.float32(0.25)
    assert verify_equivalence(net, bumped, x[:16]) == pytest.approx(0.25, rel=1e-5)

    other = build_toy_net(seed=0, input_shape=(3, 8, 8), classes=4, widths=(4, 6, 6))
    with pytest.raises(InvalidArgumentError, match="input shapes"):
        verify_equivalence(net, other, x[:4])
    fewer, _, _ = toy_setup(5, classes=2)
    fewer.input_shape = net.input_shape
    with pytest.raises(InvalidArgumentError, match="output shapes"):
        verify_equivalence(net, fewer, x[:4])
