"""1-Lipschitz building blocks: SLL dense / convolutional layers and the
spectrally normalized linear head.

Every layer computes ``x - 2 W T^-1 relu(W^T x + b)`` (or a dimension-changing
map with operator norm 1), so any composition stays 1-Lipschitz in l2.
"""
from typing import Dict, Tuple

import keras
import numpy as np
import tensorflow as tf

from app.config import POWER_ITERATIONS, SLL_EPSILON
from app.errors import ConfigurationError, ParameterError


def dense_scaling(weight: tf.Tensor, q: tf.Tensor, epsilon: float = SLL_EPSILON) -> tf.Tensor:
    """Diagonal of T: t_i = sum_j |W^T W|_ij q_j / q_i + epsilon."""
    gram = tf.abs(tf.linalg.matmul(weight, weight, transpose_a=True))
    return tf.linalg.matvec(gram, q) / q + epsilon


def sll_dense(x, weight, bias, q, epsilon: float = SLL_EPSILON) -> tf.Tensor:
    """Dense SLL map on a batch ``x`` of shape [batch, n_in]."""
    t = dense_scaling(weight, q, epsilon)
    activation = tf.nn.relu(tf.linalg.matmul(x, weight) + bias)
    return x - 2.0 * tf.linalg.matmul(activation / t, weight, transpose_b=True)


def circular_pad(x: tf.Tensor, radius: int) -> tf.Tensor:
    """Wrap-around padding of the two spatial axes of an NHWC batch."""
    if radius == 0:
        return x
    x = tf.concat([x[:, -radius:], x, x[:, :radius]], axis=1)
    return tf.concat([x[:, :, -radius:], x, x[:, :, :radius]], axis=2)


def conv_scaling(kernel: tf.Tensor, q: tf.Tensor, epsilon: float = SLL_EPSILON) -> tf.Tensor:
    """Per inner channel t_i = sum_j sum_offsets |corr(K_i, K_j)| q_j / q_i + epsilon.

    ``kernel`` has shape [h, c, k, k]. The full 2-D cross-correlation of every
    pair of kernel slices is obtained by convolving the zero-padded kernels
    with themselves.
    """
    k = int(kernel.shape[-1])
    images = tf.transpose(kernel, (0, 2, 3, 1))
    images = tf.pad(images, [[0, 0], [k - 1, k - 1], [k - 1, k - 1], [0, 0]])
    filters = tf.transpose(kernel, (2, 3, 1, 0))
    corr = tf.nn.conv2d(images, filters, strides=1, padding="VALID")
    gram = tf.reduce_sum(tf.abs(corr), axis=(1, 2))
    return tf.linalg.matvec(gram, q, transpose_a=True) / q + epsilon


def sll_conv(x, kernel, bias, q, epsilon: float = SLL_EPSILON) -> tf.Tensor:
    """Convolutional SLL map on an NCHW batch, circular padding, stride 1."""
    radius = int(kernel.shape[-1]) // 2
    t = conv_scaling(kernel, q, epsilon)
    hidden = tf.transpose(x, (0, 2, 3, 1))
    forward = tf.transpose(kernel, (2, 3, 1, 0))
    z = tf.nn.conv2d(circular_pad(hidden, radius), forward, strides=1, padding="VALID")
    z = tf.nn.relu(z + bias) / t
    # adjoint of a circular correlation: flip the kernel, swap channel roles
    adjoint = tf.transpose(tf.reverse(kernel, axis=[2, 3]), (2, 3, 0, 1))
    back = tf.nn.conv2d(circular_pad(z, radius), adjoint, strides=1, padding="VALID")
    return x - 2.0 * tf.transpose(back, (0, 3, 1, 2))


def norms(x: tf.Tensor) -> tf.Tensor:
    """Row-wise l2 norms with a zero (not NaN) gradient at the origin."""
    squared = tf.reduce_sum(tf.square(x), axis=-1, keepdims=True)
    positive = squared > 0
    safe = tf.where(positive, squared, tf.ones_like(squared))
    return tf.where(positive, tf.sqrt(safe), tf.zeros_like(squared))


def project_unit_ball(x) -> tf.Tensor:
    """Nearest point of the unit l2 ball (along the last axis)."""
    x = tf.convert_to_tensor(x)
    return x / tf.maximum(norms(x), tf.constant(1.0, dtype=x.dtype))


class LipschitzLayer(keras.layers.Layer):
    """Base class for checkpointable layers with named parameters."""

    kind: str = ""
    param_names: Tuple[str, ...] = ()

    def spec(self) -> Dict:
        raise NotImplementedError

    def parameters(self) -> Dict[str, keras.Variable]:
        return {name: getattr(self, name) for name in self.param_names}

    def check_parameters(self) -> None:
        if not tf.executing_eagerly():
            return
        for name, variable in self.parameters().items():
            if not np.all(np.isfinite(variable.numpy())):
                raise ParameterError(f"{self.name}: parameter '{name}' has non-finite entries")

    def _init_value(self, variable, value: np.ndarray) -> None:
        variable.assign(value.astype(variable.dtype))


class SllDense(LipschitzLayer):
    kind = "sll_dense"
    param_names = ("weight", "bias", "log_q")

    def __init__(self, features: int, inner_features: int, epsilon: float = SLL_EPSILON,
                 seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        if features < 1 or inner_features < 1:
            raise ConfigurationError("SLL dense sizes must be positive")
        self.features = int(features)
        self.inner_features = int(inner_features)
        self.epsilon = float(epsilon)

        self.weight = self.add_weight(shape=(features, inner_features), initializer="zeros", name="weight")
        self.bias = self.add_weight(shape=(inner_features,), initializer="zeros", name="bias")
        # q = exp(log_q) stays strictly positive under any update
        self.log_q = self.add_weight(shape=(inner_features,), initializer="zeros", name="log_q")

        rng = np.random.default_rng(seed)
        self._init_value(self.weight, rng.normal(0.0, 1.0 / np.sqrt(features), (features, inner_features)))
        self.built = True

    @property
    def q(self) -> tf.Tensor:
        return tf.exp(tf.convert_to_tensor(self.log_q))

    def call(self, x, training=False):
        self.check_parameters()
        return sll_dense(x, self.weight, self.bias, self.q, self.epsilon)

    def spec(self) -> Dict:
        return {"features": self.features, "inner_features": self.inner_features, "epsilon": self.epsilon}


class SllConv2D(LipschitzLayer):
    kind = "sll_conv"
    param_names = ("kernel", "bias", "log_q")

    def __init__(self, channels: int, inner_channels: int, kernel_size: int = 3,
                 epsilon: float = SLL_EPSILON, seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError(f"SLL conv kernel size must be odd, got {kernel_size}")
        if channels < 1 or inner_channels < 1:
            raise ConfigurationError("SLL conv channel counts must be positive")
        self.channels = int(channels)
        self.inner_channels = int(inner_channels)
        self.kernel_size = int(kernel_size)
        self.epsilon = float(epsilon)

        shape = (inner_channels, channels, kernel_size, kernel_size)
        self.kernel = self.add_weight(shape=shape, initializer="zeros", name="kernel")
        self.bias = self.add_weight(shape=(inner_channels,), initializer="zeros", name="bias")
        self.log_q = self.add_weight(shape=(inner_channels,), initializer="zeros", name="log_q")

        rng = np.random.default_rng(seed)
        fan_in = channels * kernel_size * kernel_size
        self._init_value(self.kernel, rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape))
        self.built = True

    @property
    def q(self) -> tf.Tensor:
        return tf.exp(tf.convert_to_tensor(self.log_q))

    def call(self, x, training=False):
        _, channels, height, width = x.shape
        if channels != self.channels:
            raise ConfigurationError(f"{self.name}: expected {self.channels} channels, got {channels}")
        if height < self.kernel_size or width < self.kernel_size:
            raise ConfigurationError(
                f"{self.name}: spatial size {height}x{width} smaller than kernel {self.kernel_size}"
            )
        self.check_parameters()
        return sll_conv(x, self.kernel, self.bias, self.q, self.epsilon)

    def spec(self) -> Dict:
        return {
            "channels": self.channels,
            "inner_channels": self.inner_channels,
            "kernel_size": self.kernel_size,
            "epsilon": self.epsilon,
        }


class SpectralLinear(LipschitzLayer):
    """Linear map to the embedding dimension with spectral norm divided out.

    The singular-vector estimate is persistent: each call runs
    ``power_iterations`` steps from the stored vector, and the result is
    stored back only in training mode so evaluation is repeatable.
    """

    kind = "linear"
    param_names = ("weight", "bias", "u_vector")

    def __init__(self, in_features: int, out_features: int, power_iterations: int = POWER_ITERATIONS,
                 seed: int = 0, **kwargs):
        super().__init__(**kwargs)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.power_iterations = int(power_iterations)

        self.weight = self.add_weight(shape=(in_features, out_features), initializer="zeros", name="weight")
        self.bias = self.add_weight(shape=(out_features,), initializer="zeros", name="bias")
        self.u_vector = self.add_weight(shape=(out_features,), initializer="zeros", name="u_vector",
                                        trainable=False)

        rng = np.random.default_rng(seed)
        self._init_value(self.weight, rng.normal(0.0, 1.0 / np.sqrt(in_features), (in_features, out_features)))
        u = rng.normal(size=out_features)
        self._init_value(self.u_vector, u / np.linalg.norm(u))
        self.built = True

    def spectral_norm(self, training: bool = False) -> tf.Tensor:
        """Upper bound on the largest singular value of ``weight``.

        Power iteration supplies the singular pair that carries the gradient.
        Its Rayleigh estimate never exceeds the true value, so the value
        returned is the exact top singular value whenever that is larger.
        """
        weight = tf.convert_to_tensor(self.weight)
        frozen = tf.stop_gradient(weight)
        u = tf.convert_to_tensor(self.u_vector)
        for _ in range(self.power_iterations):
            v = tf.math.l2_normalize(tf.linalg.matvec(frozen, u))
            u = tf.math.l2_normalize(tf.linalg.matvec(frozen, v, transpose_a=True))
        if training:
            self.u_vector.assign(u)
        v = tf.math.l2_normalize(tf.linalg.matvec(frozen, u))
        estimate = tf.maximum(tf.tensordot(v, tf.linalg.matvec(weight, u), axes=1),
                              tf.constant(1e-12, dtype=weight.dtype))
        exact = tf.linalg.svd(frozen, compute_uv=False)[0]
        bound = tf.maximum(exact, tf.stop_gradient(estimate))
        return estimate * (bound / tf.stop_gradient(estimate))

    def call(self, x, training=False):
        self.check_parameters()
        sigma = self.spectral_norm(training)
        return tf.linalg.matmul(x, self.weight) / sigma + self.bias

    def spec(self) -> Dict:
        return {
            "in_features": self.in_features,
            "out_features": self.out_features,
            "power_iterations": self.power_iterations,
        }
