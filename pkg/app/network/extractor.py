import logging
from typing import Iterable, List, Sequence, Tuple

import keras
import numpy as np
import tensorflow as tf

from app.core.tensor import dtype_tag, resolve_dtype
from app.errors import ConfigurationError, DimensionError, ParameterError
from app.models.models import ModelConfig
from app.network.layers import LipschitzLayer, SllConv2D, SllDense, SpectralLinear, norms

logger = logging.getLogger(__name__)


class FeatureExtractor(keras.Model):
    """Composition of 1-Lipschitz layers followed by the unit-ball projection.

    ``project`` is switched off while distilling and on for fine-tuning and
    certification.
    """

    def __init__(self, blocks: Sequence[keras.layers.Layer], input_shape: Sequence[int],
                 project: bool = True, **kwargs):
        super().__init__(**kwargs)
        self.blocks = list(blocks)
        self.image_shape = tuple(int(d) for d in input_shape)
        self.project = bool(project)
        self.embed_dim = self._infer_embed_dim()
        self.built = True

    def _infer_embed_dim(self) -> int:
        shape: Tuple[int, ...] = self.image_shape
        for layer in self.blocks:
            if isinstance(layer, SllConv2D):
                if len(shape) != 3 or shape[0] != layer.channels:
                    raise ConfigurationError(f"{layer.name} expects [{layer.channels}, s, s] input, got {list(shape)}")
            elif isinstance(layer, keras.layers.Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, SllDense):
                if shape != (layer.features,):
                    raise ConfigurationError(f"{layer.name} expects [{layer.features}] input, got {list(shape)}")
            elif isinstance(layer, SpectralLinear):
                if shape != (layer.in_features,):
                    raise ConfigurationError(f"{layer.name} expects [{layer.in_features}] input, got {list(shape)}")
                shape = (layer.out_features,)
            else:
                raise ConfigurationError(f"Unsupported layer {type(layer).__name__}")
        if len(shape) != 1:
            raise ConfigurationError(f"Extractor output must be a vector, got shape {list(shape)}")
        return shape[0]

    @property
    def compute_tf_dtype(self) -> tf.DType:
        return resolve_dtype(self.dtype_policy.compute_dtype)

    def features(self, x, training: bool = False) -> tf.Tensor:
        """Pre-projection features for a batch of inputs."""
        x = tf.cast(tf.convert_to_tensor(x), self.compute_tf_dtype)
        if tuple(x.shape[1:]) != self.image_shape:
            raise DimensionError(
                f"Input shape {x.shape.as_list()[1:]} does not match extractor input {list(self.image_shape)}"
            )
        z = x
        for layer in self.blocks:
            if isinstance(layer, LipschitzLayer):
                z = layer(z, training=training)
            else:
                z = layer(z)
        return z

    def embed(self, x, training: bool = False) -> Tuple[tf.Tensor, tf.Tensor]:
        """Return ``(embeddings, pre_projection_norms)`` for a batch."""
        z = self.features(x, training=training)
        pre_norms = norms(z)
        if self.project:
            z = z / tf.maximum(pre_norms, tf.constant(1.0, dtype=z.dtype))
        return z, pre_norms[:, 0]

    def call(self, x, training=False):
        embeddings, _ = self.embed(x, training=training)
        return embeddings

    def extract(self, x) -> Tuple[np.ndarray, float]:
        """Embed a single input; also report its norm before projection."""
        x = np.asarray(x)
        if x.shape != self.image_shape:
            raise DimensionError(f"Input shape {list(x.shape)} does not match extractor input {list(self.image_shape)}")
        embedding, pre_norm = self.embed(x[None])
        return embedding.numpy()[0], float(pre_norm.numpy()[0])

    def lipschitz_layers(self) -> List[LipschitzLayer]:
        return [layer for layer in self.blocks if isinstance(layer, LipschitzLayer)]

    def parameter_tensors(self) -> Iterable[Tuple[str, keras.Variable]]:
        for index, layer in enumerate(self.blocks):
            if isinstance(layer, LipschitzLayer):
                for name, variable in layer.parameters().items():
                    yield f"{index}.{name}", variable

    def check_parameters(self) -> None:
        """Assert every parameter is finite and every q is strictly positive."""
        for layer in self.lipschitz_layers():
            layer.check_parameters()
            if isinstance(layer, (SllDense, SllConv2D)):
                if not bool(tf.reduce_all(layer.q > 0)):
                    raise ParameterError(f"{layer.name}: q lost strict positivity")

    @property
    def dtype_tag(self) -> str:
        return dtype_tag(self.dtype_policy.compute_dtype)


def build_extractor(config: ModelConfig, seed: int = 0, project: bool = True) -> FeatureExtractor:
    """Desk-scale stack: Conv-SLL blocks, flatten, Dense-SLL blocks, spectral head."""
    dtype = resolve_dtype(config.dtype).name
    input_shape = (config.channels, config.image_size, config.image_size)
    if config.image_size < config.kernel_size and config.conv_layers:
        raise ConfigurationError(
            f"image_size {config.image_size} is smaller than kernel_size {config.kernel_size}"
        )
    rng = np.random.default_rng(seed)

    def next_seed() -> int:
        return int(rng.integers(0, 2**31 - 1))

    blocks: List[keras.layers.Layer] = []
    for _ in range(config.conv_layers):
        blocks.append(SllConv2D(config.channels, config.conv_inner, config.kernel_size,
                                epsilon=config.epsilon, seed=next_seed(), dtype=dtype))
    blocks.append(keras.layers.Flatten(dtype=dtype))
    features = config.channels * config.image_size * config.image_size
    for _ in range(config.dense_layers):
        blocks.append(SllDense(features, config.dense_inner, epsilon=config.epsilon,
                               seed=next_seed(), dtype=dtype))
    blocks.append(SpectralLinear(features, config.embed_dim, power_iterations=config.power_iterations,
                                 seed=next_seed(), dtype=dtype))

    extractor = FeatureExtractor(blocks, input_shape, project=project, dtype=dtype)
    logger.info(
        "✅ Built extractor: %d conv-SLL, %d dense-SLL, embed_dim=%d (%s)",
        config.conv_layers, config.dense_layers, extractor.embed_dim, config.dtype,
    )
    return extractor
