"""Checkpoint file: ``b"LSCK"``, version byte, 3 padding bytes, u64 header
length, UTF-8 JSON header, then one LSTN blob per layer parameter in header
order."""
import json
import logging
import struct
from pathlib import Path

import keras
import numpy as np

from app.core.lstn import decode_tensor, encode_tensor
from app.core.tensor import resolve_dtype
from app.errors import FormatError, TensorIOError
from app.network.extractor import FeatureExtractor
from app.network.layers import LipschitzLayer, SllConv2D, SllDense, SpectralLinear

logger = logging.getLogger(__name__)

MAGIC = b"LSCK"
VERSION = 1
PREFIX = struct.Struct("<4sB3xQ")

LAYER_TYPES = {cls.kind: cls for cls in (SllDense, SllConv2D, SpectralLinear)}


def _layer_spec(layer) -> dict:
    if isinstance(layer, keras.layers.Flatten):
        return {"type": "flatten", "config": {}, "params": []}
    if isinstance(layer, LipschitzLayer):
        return {"type": layer.kind, "config": layer.spec(), "params": list(layer.param_names)}
    raise FormatError(f"Cannot serialize layer {type(layer).__name__}")


def save_model(extractor: FeatureExtractor, path) -> None:
    header = {
        "version": VERSION,
        "dtype": extractor.dtype_tag,
        "input_shape": list(extractor.image_shape),
        "project": extractor.project,
        "embed_dim": extractor.embed_dim,
        "layers": [_layer_spec(layer) for layer in extractor.blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [encode_tensor(variable.numpy()) for _, variable in extractor.parameter_tensors()]
    Path(path).write_bytes(PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + b"".join(blobs))
    logger.info("✅ Saved model checkpoint to %s (%d tensors)", path, len(blobs))


def _build_layer(spec: dict, dtype: str):
    kind = spec.get("type")
    if kind == "flatten":
        return keras.layers.Flatten(dtype=dtype)
    if kind not in LAYER_TYPES:
        raise FormatError(f"Unknown layer type {kind!r} in checkpoint header")
    try:
        return LAYER_TYPES[kind](**spec.get("config", {}), dtype=dtype)
    except TypeError as e:
        raise FormatError(f"Invalid config for layer {kind!r}: {e}") from e


def load_model(path) -> FeatureExtractor:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise TensorIOError(f"Checkpoint not found: {path}") from e
    if len(data) < PREFIX.size:
        raise TensorIOError(f"Truncated checkpoint prefix in {path}")
    magic, version, header_length = PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"Bad checkpoint magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"Unsupported checkpoint version {version}", offset=4)

    start = PREFIX.size
    if len(data) - start < header_length:
        raise TensorIOError(f"Truncated checkpoint header in {path}")
    try:
        header = json.loads(data[start:start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Checkpoint header is not valid JSON: {e}", offset=start) from e
    if header.get("version") != VERSION:
        raise FormatError(f"Header version {header.get('version')} does not match {VERSION}", offset=start)

    dtype = resolve_dtype(header.get("dtype", "f64")).name
    blocks = [_build_layer(spec, dtype) for spec in header.get("layers", [])]
    extractor = FeatureExtractor(blocks, header["input_shape"], project=header.get("project", True), dtype=dtype)

    offset = start + header_length
    expected = list(extractor.parameter_tensors())
    for index, (name, variable) in enumerate(expected):
        if offset == len(data):
            raise FormatError(
                f"Header declares {len(header['layers'])} layers with {len(expected)} parameter tensors "
                f"but only {index} blobs are present",
                offset=offset,
            )
        array, offset = decode_tensor(data, offset)
        if tuple(array.shape) != tuple(variable.shape):
            raise FormatError(
                f"Parameter {name}: blob shape {list(array.shape)} != expected {list(variable.shape)}",
                offset=offset,
            )
        variable.assign(array.astype(np.dtype(variable.dtype)))
    if offset != len(data):
        raise FormatError(f"Unexpected trailing data after {len(expected)} blobs", offset=offset)

    extractor.check_parameters()
    logger.info("✅ Model loaded successfully from %s", path)
    return extractor
