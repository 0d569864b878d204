from .tensor import (
    DTYPES,
    as_tensor,
    dtype_tag,
    grad_check,
    gradient,
    l2_norm,
    matmul,
    relu,
    resolve_dtype,
)
from .lstn import decode_tensor, encode_tensor, read_tensor, write_tensor

__all__ = [
    "DTYPES",
    "as_tensor",
    "dtype_tag",
    "grad_check",
    "gradient",
    "l2_norm",
    "matmul",
    "relu",
    "resolve_dtype",
    "decode_tensor",
    "encode_tensor",
    "read_tensor",
    "write_tensor",
]
