"""Dense tensor helpers on top of TensorFlow.

Values are plain ``tf.Tensor`` objects tagged ``f32`` or ``f64``. Reverse-mode
differentiation goes through ``tf.GradientTape``: the tape records every
executed op and replays the records backwards, visiting each node once and
summing the gradients of values that are used more than once.
"""
from typing import Callable, Tuple

import numpy as np
import tensorflow as tf

from app.errors import ConfigurationError, DimensionError, EvaluationError, ParameterError

DTYPES = {"f32": tf.float32, "f64": tf.float64}


def resolve_dtype(dtype) -> tf.DType:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    try:
        resolved = tf.as_dtype(dtype)
    except TypeError as e:
        raise ConfigurationError(f"Unsupported dtype: {dtype!r}") from e
    if resolved not in DTYPES.values():
        raise ConfigurationError(f"Unsupported dtype: {dtype!r} (expected f32 or f64)")
    return resolved


def dtype_tag(dtype) -> str:
    resolved = resolve_dtype(dtype)
    return "f64" if resolved == tf.float64 else "f32"


def as_tensor(data, dtype="f64", allow_nonfinite: bool = False) -> tf.Tensor:
    """Convert an array-like into a tensor of the requested dtype."""
    resolved = resolve_dtype(dtype)
    tensor = tf.convert_to_tensor(np.asarray(data, dtype=resolved.as_numpy_dtype))
    if not allow_nonfinite and not bool(tf.reduce_all(tf.math.is_finite(tensor))):
        raise ParameterError(f"Tensor of shape {tensor.shape.as_list()} has non-finite entries")
    return tensor


def matmul(a, b) -> tf.Tensor:
    a = tf.convert_to_tensor(a)
    b = tf.convert_to_tensor(b)
    if a.shape.rank != 2 or b.shape.rank != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape.as_list()} and {b.shape.as_list()}"
        )
    if a.dtype != b.dtype:
        raise ParameterError(f"matmul: dtype mismatch {a.dtype.name} vs {b.dtype.name}")
    return tf.linalg.matmul(a, b)


def relu(x) -> tf.Tensor:
    # TensorFlow's ReLU gradient uses x > 0, so the subgradient at 0 is 0.
    return tf.nn.relu(x)


def l2_norm(x) -> tf.Tensor:
    """Euclidean norm over all entries, accumulated in f64."""
    x = tf.convert_to_tensor(x)
    squared = tf.reduce_sum(tf.square(tf.cast(x, tf.float64)))
    return tf.cast(tf.sqrt(squared), x.dtype)


def gradient(fn: Callable[[tf.Tensor], tf.Tensor], x) -> Tuple[tf.Tensor, tf.Tensor]:
    """Return ``(fn(x), d fn / d x)`` by reverse-mode differentiation."""
    x = tf.convert_to_tensor(x)
    with tf.GradientTape() as tape:
        tape.watch(x)
        value = fn(x)
    grad = tape.gradient(value, x, unconnected_gradients=tf.UnconnectedGradients.ZERO)
    return value, grad


def _scalar(value) -> float:
    value = np.asarray(value, dtype=np.float64)
    if value.size != 1:
        raise EvaluationError(f"grad_check expects a scalar function, got shape {value.shape}")
    result = float(value.reshape(()))
    if not np.isfinite(result):
        raise EvaluationError(f"Function value is not finite: {result}")
    return result


def grad_check(fn: Callable[[tf.Tensor], tf.Tensor], point, step: float = 1e-5) -> float:
    """Compare the tape gradient of ``fn`` with central finite differences.

    Returns ``max_i |g_ad - g_fd| / max(1, |g_fd|)``.
    """
    if step <= 0:
        raise ConfigurationError(f"Finite-difference step must be positive, got {step}")
    point = tf.convert_to_tensor(point)
    value, g_ad = gradient(fn, point)
    _scalar(value)

    base = point.numpy()
    flat = base.reshape(-1)
    g_fd = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        shifted = flat.copy()
        shifted[i] = flat[i] + step
        f_plus = _scalar(fn(tf.constant(shifted.reshape(base.shape), dtype=point.dtype)))
        shifted[i] = flat[i] - step
        f_minus = _scalar(fn(tf.constant(shifted.reshape(base.shape), dtype=point.dtype)))
        g_fd[i] = (f_plus - f_minus) / (2.0 * step)

    g_ad = np.asarray(g_ad, dtype=np.float64).reshape(-1)
    errors = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(errors.max()) if errors.size else 0.0
