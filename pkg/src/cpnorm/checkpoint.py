"""Binary checkpoints: magic, header length, JSON header, float32 payload.

Layout::

    b"CPNCKPT\\0"            8 bytes
    header length            uint64, little endian
    header                   UTF-8 JSON
    payload                  little-endian float32 arrays, back to back

The header lists every array as ``{"name", "shape", "offset", "nbytes"}``
with offsets relative to the payload start; together they must tile the
payload without gaps or overlap.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
from threadpoolctl import threadpool_info

from .cp import CpForm
from .nn.layers import Conv2d, CpNormWeight, DenseWeight, Dropout, Flatten, Linear, MaxPool2d, ReLU, WeightNormWeight
from .nn.model import LayerSpec, Model

MAGIC = b"CPNCKPT\0"
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def thread_count() -> int:
    """Threads of the BLAS pools numpy is linked against (1 if none are detected)."""
    counts = [info["num_threads"] for info in threadpool_info()]
    return max(counts) if counts else 1


def save_checkpoint(path, model: Model, metadata: dict | None = None) -> None:
    """Write ``model`` atomically; the same model and metadata give identical bytes."""
    if model.specs is None:
        raise CheckpointError("model has no layer specs to record")
    entries, blobs, offset = [], [], 0
    for name, arr in model.parameters():
        blob = np.ascontiguousarray(arr, dtype=PAYLOAD_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "input_shape": list(model.input_shape),
        "layers": [s.to_dict() for s in model.current_specs()],
        "tensors": entries,
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Validated header and arrays keyed by parameter name."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    start = len(MAGIC) + 8
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):start])
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    payload = memoryview(raw)[start + hlen:]
    arrays, cursor = {}, 0
    for e in sorted(header["tensors"], key=lambda e: e["offset"]):
        expected = int(np.prod(e["shape"], dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if e["offset"] != cursor or e["nbytes"] != expected:
            raise CheckpointError(f"{path}: tensor {e['name']} does not tile the payload")
        cursor += e["nbytes"]
        if cursor > len(payload):
            raise CheckpointError(f"{path}: payload truncated inside {e['name']}")
        buf = payload[e["offset"]:cursor]
        arrays[e["name"]] = np.frombuffer(buf, dtype=PAYLOAD_DTYPE).reshape(e["shape"]).astype(np.float32)
    if cursor != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - cursor} unaccounted payload bytes")
    return header, arrays


def model_from_arrays(specs: list[LayerSpec], input_shape, arrays: dict[str, np.ndarray]) -> Model:
    """Assemble a model from specs and named parameter arrays (no initialisation)."""

    def take(key):
        try:
            return arrays[key]
        except KeyError:
            raise CheckpointError(f"missing tensor {key}") from None

    layers = []
    for s in specs:
        if s.has_weight:
            if s.normalization == "none":
                param = DenseWeight(take(f"{s.name}.weight"))
            elif s.normalization == "weight":
                param = WeightNormWeight(take(f"{s.name}.v"), 1.0)
                param.params["g"] = take(f"{s.name}.g")
            else:
                order = len(s.weight_shape)
                cp = CpForm([take(f"{s.name}.factor_{k}") for k in range(order)], take(f"{s.name}.lambdas"))
                param = CpNormWeight(cp, 1.0)
                param.params["sigma"] = take(f"{s.name}.sigma")
            if tuple(param.shape) != s.weight_shape:
                raise CheckpointError(f"{s.name}: stored shape {param.shape} != {s.weight_shape}")
            bias = take(f"{s.name}.bias") if s.bias else None
            if s.kind == "conv2d":
                layers.append(Conv2d(s.name, param, bias, s.stride, s.padding))
            else:
                layers.append(Linear(s.name, param, bias))
        elif s.kind == "maxpool":
            layers.append(MaxPool2d(s.name, 2))
        elif s.kind == "relu":
            layers.append(ReLU(s.name))
        elif s.kind == "dropout":
            layers.append(Dropout(s.name, s.keep_prob))
        elif s.kind == "flatten":
            layers.append(Flatten(s.name))
    return Model(layers, input_shape, list(specs))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Model and its metadata."""
    header, arrays = read_checkpoint(path)
    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = model_from_arrays(specs, header["input_shape"], arrays)
    expected = {name for name, _ in model.parameters()}
    if expected != set(arrays):
        raise CheckpointError(f"{path}: unexpected tensors {sorted(set(arrays) - expected)}")
    return model, header["metadata"]
