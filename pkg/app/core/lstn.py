"""LSTN binary tensor format.

Layout: ``b"LSTN"``, version byte (1), dtype byte (1 = f32, 2 = f64), ndim
byte, 4 padding bytes, ``ndim`` little-endian u64 dimensions, then the
row-major little-endian payload.
"""
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from app.errors import FormatError, ParameterError, TensorIOError

MAGIC = b"LSTN"
VERSION = 1
HEADER = struct.Struct("<4sBBB4x")

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    code = _CODE_FOR.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ParameterError(f"LSTN supports f32/f64 tensors only, got {array.dtype}")
    if any(dim <= 0 for dim in array.shape):
        raise ParameterError(f"LSTN dimensions must be positive, got {array.shape}")
    header = HEADER.pack(MAGIC, VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the next offset."""
    view = memoryview(buffer)
    if len(view) - offset < HEADER.size:
        raise TensorIOError(f"Truncated LSTN header at byte offset {offset}")
    magic, version, code, ndim = HEADER.unpack_from(view, offset)
    if magic != MAGIC:
        raise FormatError(f"Bad LSTN magic {magic!r}", offset=offset)
    if version != VERSION:
        raise FormatError(f"Unsupported LSTN version {version}", offset=offset + 4)
    if code not in _CODES:
        raise FormatError(f"Unknown LSTN dtype code {code}", offset=offset + 5)

    cursor = offset + HEADER.size
    if len(view) - cursor < 8 * ndim:
        raise TensorIOError(f"Truncated LSTN dimensions at byte offset {cursor}")
    shape = struct.unpack_from(f"<{ndim}Q", view, cursor)
    if any(dim == 0 for dim in shape):
        raise FormatError(f"LSTN dimension of size 0 in {shape}", offset=cursor)
    cursor += 8 * ndim

    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(view) - cursor < nbytes:
        raise TensorIOError(
            f"Truncated LSTN payload: expected {nbytes} bytes at offset {cursor}, "
            f"found {len(view) - cursor}"
        )
    array = np.frombuffer(view, dtype=dtype, count=nbytes // dtype.itemsize, offset=cursor)
    array = array.reshape(shape).astype(dtype.newbyteorder("="))
    return array, cursor + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise TensorIOError(f"Tensor file not found: {path}") from e
    array, end = decode_tensor(data)
    if end != len(data):
        raise FormatError(f"Trailing bytes after tensor in {path}", offset=end)
    return array
