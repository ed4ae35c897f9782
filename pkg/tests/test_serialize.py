"""Binary container round-trips and corruption handling."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldrf.errors import FormatError, InvalidArgumentError
from ldrf.netcore import LayerSpec, Network, forward
from ldrf.serialize import (
    DATA_MAGIC,
    MODEL_MAGIC,
    dataset_from_bytes,
    dataset_to_bytes,
    load_dataset,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_dataset,
    save_model,
)
from ldrf.synth import build_toy_net, gen_synthetic


def small_net(seed=0):
    return build_toy_net(seed=seed, input_shape=(3, 8, 8), classes=3, widths=(4, 6, 6))


def test_model_round_trip_is_exact():
    net = small_net()
    net.masks = {"conv2": np.array([1, 0, 1, 1, 0, 1], dtype=np.float32)}
    data = model_to_bytes(net, seed=11, config={"energy": 0.6})
    back, seed, config = model_from_bytes(data)
    assert seed == 11
    assert config == {"energy": 0.6}
    assert back.name == net.name
    assert back.form == net.form
    assert tuple(back.input_shape) == tuple(net.input_shape)
    assert len(back.layers) == len(net.layers)
    for a, b in zip(net.layers, back.layers):
        assert a.kind == b.kind and a.name == b.name
        if a.weight is not None:
            assert np.array_equal(a.weight, b.weight)
            assert a.weight.dtype == b.weight.dtype == np.float32
        if a.bias is not None:
            assert np.array_equal(a.bias, b.bias)
    assert np.array_equal(back.masks["conv2"], net.masks["conv2"])
    x = np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(forward(net, x)[0], forward(back, x)[0])


def test_model_bytes_deterministic():
    net = small_net(3)
    assert model_to_bytes(net, seed=1) == model_to_bytes(net.copy(), seed=1)


def test_model_bad_magic_offset_zero():
    data = model_to_bytes(small_net())
    with pytest.raises(FormatError) as err:
        model_from_bytes(b"XXXX" + data[4:])
    assert err.value.offset == 0


def test_model_bad_version_offset_four():
    data = bytearray(model_to_bytes(small_net()))
    data[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(FormatError) as err:
        model_from_bytes(bytes(data))
    assert err.value.offset == 4


def test_model_truncated_header():
    with pytest.raises(FormatError) as err:
        model_from_bytes(MODEL_MAGIC + b"\x01")
    assert err.value.offset == 0


def test_model_corrupt_manifest_json():
    data = bytearray(model_to_bytes(small_net()))
    data[16] = ord("!")  # first manifest byte; manifest starts with '{'
    with pytest.raises(FormatError) as err:
        model_from_bytes(bytes(data))
    assert err.value.offset == 16


def test_model_truncated_blob_names_field_and_offset():
    data = model_to_bytes(small_net())
    with pytest.raises(FormatError) as err:
        model_from_bytes(data[:-40])
    # Either the blob size check or an array overrun fires; both must
    # point into/at the blob region and mention what went wrong.
    assert err.value.offset >= 16
    assert "blob" in str(err.value)


def test_model_array_overrun_reports_layer():
    net = small_net()
    raw = model_to_bytes(net)
    mlen = int.from_bytes(raw[8:16], "little")
    manifest = raw[16:16 + mlen].decode()
    # Point conv1's weight beyond the end of the blob but keep the blob
    # size declaration intact.
    blob_size = len(raw) - 16 - mlen
    corrupted = manifest.replace('"offset":0', f'"offset":{blob_size}', 1)
    assert corrupted != manifest
    data = raw[:8] + len(corrupted).to_bytes(8, "little") + corrupted.encode() + raw[16 + mlen:]
    with pytest.raises(FormatError) as err:
        model_from_bytes(data)
    assert "overruns" in str(err.value)


def test_model_unknown_kind_rejected():
    raw = model_to_bytes(small_net())
    mlen = int.from_bytes(raw[8:16], "little")
    manifest = raw[16:16 + mlen].decode().replace('"kind":"conv"', '"kind":"conv9"', 1)
    data = raw[:8] + len(manifest).to_bytes(8, "little") + manifest.encode() + raw[16 + mlen:]
    with pytest.raises(FormatError):
        model_from_bytes(data)


def test_model_file_round_trip(tmp_path):
    net = small_net(5)
    path = tmp_path / "model.ldrf"
    save_model(path, net, seed=7)
    back, seed, _ = load_model(path)
    assert seed == 7
    assert np.array_equal(back.layers[0].weight, net.layers[0].weight)


def test_dataset_round_trip():
    x, y = gen_synthetic(0, 12, classes=3, shape=(2, 6, 6))
    data = dataset_to_bytes(x, y, 3)
    xb, yb, nc = dataset_from_bytes(data)
    assert nc == 3
    assert np.array_equal(xb, x)
    assert np.array_equal(yb, y)
    assert xb.dtype == np.float32 and yb.dtype == np.int64


def test_dataset_bytes_deterministic(tmp_path):
    x, y = gen_synthetic(4, 9, classes=3, shape=(1, 4, 4))
    p1, p2 = tmp_path / "a.ldds", tmp_path / "b.ldds"
    save_dataset(p1, x, y, 3)
    save_dataset(p2, x.copy(), y.copy(), 3)
    assert p1.read_bytes() == p2.read_bytes()
    xb, yb, _ = load_dataset(p1)
    assert np.array_equal(xb, x) and np.array_equal(yb, y)


def test_dataset_bad_magic():
    x, y = gen_synthetic(0, 3, classes=3, shape=(1, 4, 4))
    data = dataset_to_bytes(x, y, 3)
    with pytest.raises(FormatError) as err:
        dataset_from_bytes(b"NOPE" + data[4:])
    assert err.value.offset == 0


def test_dataset_wrong_length_reports_expected_bytes():
    x, y = gen_synthetic(0, 3, classes=3, shape=(1, 4, 4))
    data = dataset_to_bytes(x, y, 3)
    with pytest.raises(FormatError) as err:
        dataset_from_bytes(data[:-2])
    assert "expected" in str(err.value)


def test_dataset_label_out_of_range():
    x, y = gen_synthetic(0, 3, classes=3, shape=(1, 4, 4))
    data = bytearray(dataset_to_bytes(x, y, 3))
    data[-4:] = (250).to_bytes(4, "little")
    with pytest.raises(FormatError) as err:
        dataset_from_bytes(bytes(data))
    assert "range" in str(err.value)
    # writer refuses as well
    with pytest.raises(InvalidArgumentError):
        dataset_to_bytes(x, np.full_like(y, 9), 3)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_model_round_trip_random_masks(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed % 17)
    mask = (rng.uniform(size=4) > 0.4).astype(np.float32)
    if not mask.any():
        mask[0] = 1.0
    net.masks = {"conv1": mask}
    back, _, _ = model_from_bytes(model_to_bytes(net))
    assert np.array_equal(back.masks["conv1"], mask)
