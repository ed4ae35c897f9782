"""Binary container formats for networks and datasets.

Model files ("LDRF" magic) hold a little-endian header, a compact JSON
manifest with sorted keys, and a float32 parameter blob.  Dataset files
("LDDS" magic) hold image tensors plus integer labels.  Both formats are
fully deterministic: identical inputs produce byte-identical files, so
artifacts can be diffed and cached by content hash.

Model layout::

    bytes 0..4    magic b"LDRF"
    bytes 4..8    u32 format version (currently 1)
    bytes 8..16   u64 manifest byte length M
    bytes 16..16+M  manifest: UTF-8 JSON, sorted keys, no whitespace
    rest          float32 little-endian parameter blob

Dataset layout::

    bytes 0..4    magic b"LDDS"
    bytes 4..8    u32 format version (currently 1)
    bytes 8..28   u32 n, c, h, w, num_classes
    next 4*n*c*h*w   float32 little-endian image data (n,c,h,w) row-major
    next 4*n      u32 labels

All structural problems raise :class:`FormatError` carrying the byte
offset where parsing failed.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .netcore import KINDS, LayerSpec, Network

MODEL_MAGIC = b"LDRF"
DATA_MAGIC = b"LDDS"
FORMAT_VERSION = 1

_MODEL_HEADER = struct.Struct("<4sIQ")
_DATA_HEADER = struct.Struct("<4sIIIIII")

# per-kind array attributes, serialized in this order
_ARRAY_FIELDS = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


def _layer_record(layer: LayerSpec, arrays: dict) -> dict:
    rec = {
        "kind": layer.kind,
        "name": layer.name,
        "k": int(layer.k),
        "pad": int(layer.pad),
        "stride": int(layer.stride),
        "in_channels": int(layer.in_channels),
        "out_channels": int(layer.out_channels),
        "relu": bool(layer.relu),
        "arrays": arrays,
    }
    if layer.kind == "batchnorm":
        rec["eps"] = float(layer.eps)
    return rec


def model_to_bytes(
    net: Network,
    seed: int | None = None,
    config: dict | None = None,
) -> bytes:
    """Serialize a network (plus optional provenance) to the model format."""
    blob_parts: list[bytes] = []
    offset = 0
    layer_recs = []
    for layer in net.layers:
        arrays = {}
        for field in _ARRAY_FIELDS:
            arr = getattr(layer, field)
            if arr is None:
                continue
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            arrays[field] = {"shape": list(arr32.shape), "offset": offset}
            raw = arr32.tobytes()
            blob_parts.append(raw)
            offset += len(raw)
        layer_recs.append(_layer_record(layer, arrays))
    manifest = {
        "version": FORMAT_VERSION,
        "name": net.name,
        "form": net.form,
        "input_shape": list(net.input_shape),
        "layers": layer_recs,
        "masks": {k: np.asarray(v).astype(int).tolist() for k, v in sorted(net.masks.items())},
        "seed": seed,
        "config": config,
        "blob_size": offset,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = _MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, len(mbytes))
    return header + mbytes + b"".join(blob_parts)


def save_model(path, net: Network, seed=None, config=None) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(net, seed=seed, config=config))


def _require(cond: bool, message: str, offset: int) -> None:
    if not cond:
        raise FormatError(message, offset=offset)


def model_from_bytes(data: bytes):
    """Parse model bytes -> (Network, seed, config).  Strict: rejects junk."""
    _require(len(data) >= _MODEL_HEADER.size, "file shorter than model header", 0)
    magic, version, mlen = _MODEL_HEADER.unpack_from(data, 0)
    _require(magic == MODEL_MAGIC, f"bad magic {magic!r}, expected {MODEL_MAGIC!r}", 0)
    _require(version == FORMAT_VERSION, f"unsupported model format version {version}", 4)
    mstart = _MODEL_HEADER.size
    _require(len(data) >= mstart + mlen, "manifest truncated", mstart)
    try:
        manifest = json.loads(data[mstart:mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}", offset=mstart) from None
    blob_start = mstart + mlen
    blob = data[blob_start:]
    _require(
        len(blob) == manifest.get("blob_size", len(blob)),
        f"blob is {len(blob)} bytes but manifest declares {manifest.get('blob_size')}",
        blob_start,
    )
    layers = []
    for rec in manifest["layers"]:
        kind = rec["kind"]
        if kind not in KINDS:
            raise FormatError(
                f"layer {rec.get('name')!r} has unknown kind {kind!r}", offset=mstart
            )
        layer = LayerSpec(
            kind=kind,
            name=rec["name"],
            k=rec["k"],
            pad=rec["pad"],
            stride=rec["stride"],
            in_channels=rec["in_channels"],
            out_channels=rec["out_channels"],
            relu=rec["relu"],
            eps=rec.get("eps", 1e-5),
        )
        for field, info in rec["arrays"].items():
            if field not in _ARRAY_FIELDS:
                raise FormatError(
                    f"layer {rec['name']!r} declares unknown array {field!r}",
                    offset=mstart,
                )
            shape = tuple(info["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = info["offset"]
            end = start + 4 * count
            if start < 0 or end > len(blob):
                raise FormatError(
                    f"array {field!r} of layer {rec['name']!r} overruns the blob "
                    f"({count} floats at offset {start}, blob is {len(blob)} bytes)",
                    offset=blob_start + max(start, 0),
                )
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
            setattr(layer, field, arr.reshape(shape).copy())
        layers.append(layer)
    net = Network(
        layers=layers,
        name=manifest["name"],
        input_shape=tuple(manifest["input_shape"]),
        form=manifest["form"],
        masks={k: np.asarray(v, dtype=np.float32) for k, v in manifest["masks"].items()},
    )
    return net, manifest.get("seed"), manifest.get("config")


def load_model(path):
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def dataset_to_bytes(x: np.ndarray, y: np.ndarray, num_classes: int) -> bytes:
    x = np.ascontiguousarray(x, dtype="<f4")
    y = np.ascontiguousarray(y, dtype="<u4")
    if x.ndim != 4:
        raise InvalidArgumentError(f"dataset images must be 4-D (n,c,h,w), got {x.shape}")
    if y.shape != (x.shape[0],):
        raise InvalidArgumentError(
            f"labels shape {y.shape} does not match {x.shape[0]} images"
        )
    if y.size and y.max() >= num_classes:
        raise InvalidArgumentError(
            f"label {int(y.max())} out of range for {num_classes} classes"
        )
    n, c, h, w = x.shape
    header = _DATA_HEADER.pack(DATA_MAGIC, FORMAT_VERSION, n, c, h, w, num_classes)
    return header + x.tobytes() + y.tobytes()


def save_dataset(path, x, y, num_classes) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(x, y, num_classes))


def dataset_from_bytes(data: bytes):
    """Parse dataset bytes -> (x, y, num_classes)."""
    _require(len(data) >= _DATA_HEADER.size, "file shorter than dataset header", 0)
    magic, version, n, c, h, w, num_classes = _DATA_HEADER.unpack_from(data, 0)
    _require(magic == DATA_MAGIC, f"bad magic {magic!r}, expected {DATA_MAGIC!r}", 0)
    _require(version == FORMAT_VERSION, f"unsupported dataset format version {version}", 4)
    pixel_bytes = 4 * n * c * h * w
    label_start = _DATA_HEADER.size + pixel_bytes
    expected = label_start + 4 * n
    _require(
        len(data) == expected,
        f"file is {len(data)} bytes, expected {expected} for {n} images of "
        f"{c}x{h}x{w} plus labels",
        min(len(data), expected),
    )
    x = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=_DATA_HEADER.size)
    x = x.reshape(n, c, h, w).copy()
    y = np.frombuffer(data, dtype="<u4", count=n, offset=label_start).astype(np.int64)
    if y.size and y.max() >= num_classes:
        raise FormatError(
            f"label {int(y.max())} out of range for {num_classes} classes",
            offset=label_start,
        )
    return x, y, num_classes


def load_dataset(path):
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
