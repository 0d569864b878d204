import keras
import numpy as np
import pytest
import tensorflow as tf

from app import config as settings
from app.errors import ConfigurationError, DimensionError, ParameterError
from app.models.models import ModelConfig
from app.network.extractor import FeatureExtractor, build_extractor
from app.network.layers import (
    SllConv2D,
    SllDense,
    SpectralLinear,
    dense_scaling,
    project_unit_ball,
    sll_conv,
    sll_dense,
)
from app.services.selfcheck import lipschitz_ratio, sll_conv_oracle


def test_dense_scaling_closed_form():
    weight = tf.constant([[1.0, 0.0], [0.0, 2.0]], tf.float64)
    q = tf.constant([1.0, 1.0], tf.float64)
    # |W^T W| = diag(1, 4)
    np.testing.assert_allclose(dense_scaling(weight, q, 0.0).numpy(), [1.0, 4.0])


def test_sll_dense_zero_weight_is_identity(rng):
    layer = SllDense(5, 3, dtype="float64")
    layer.weight.assign(np.zeros((5, 3)))
    x = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(layer(x).numpy(), x)


def test_sll_dense_is_one_lipschitz(rng):
    layer = SllDense(10, 20, seed=3, dtype="float64")
    layer.log_q.assign(rng.normal(size=20))
    layer.bias.assign(rng.normal(size=20) * 0.1)
    assert lipschitz_ratio(lambda x: layer(x).numpy(), (10,), 10_000, rng) <= 1.0 + 1e-9


def test_sll_conv_is_one_lipschitz(rng):
    layer = SllConv2D(3, 5, 3, seed=4, dtype="float64")
    assert lipschitz_ratio(lambda x: layer(x).numpy(), (3, 8, 8), 2_000, rng) <= 1.0 + 1e-9


def test_sll_conv_matches_im2col_oracle(rng):
    layer = SllConv2D(3, 4, 3, seed=5, dtype="float64")
    layer.bias.assign(rng.normal(size=4) * 0.1)
    layer.log_q.assign(rng.normal(size=4) * 0.3)
    x = rng.uniform(size=(2, 3, 8, 8))
    ours = sll_conv(tf.constant(x), layer.kernel, layer.bias, layer.q, layer.epsilon).numpy()
    oracle = sll_conv_oracle(x, layer.kernel.numpy(), layer.bias.numpy(), layer.q.numpy(), layer.epsilon)
    assert np.max(np.abs(ours - oracle)) <= 1e-10


def test_sll_conv_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        SllConv2D(3, 4, kernel_size=2)


def test_sll_conv_rejects_small_images():
    layer = SllConv2D(3, 4, kernel_size=5, dtype="float64")
    with pytest.raises(ConfigurationError):
        layer(np.zeros((1, 3, 4, 4)))


def test_spectral_linear_divides_by_an_upper_bound():
    layer = SpectralLinear(12, 6, power_iterations=1, seed=1, dtype="float64")
    sigma = float(layer.spectral_norm())
    assert sigma >= np.linalg.svd(layer.weight.numpy(), compute_uv=False)[0] * (1.0 - 1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_default_head_is_one_lipschitz_along_top_singular_direction(seed):
    model = build_extractor(ModelConfig(), seed=seed, project=False)
    head = model.blocks[-1]
    weight = head.weight.numpy()
    left, singular, _ = np.linalg.svd(weight, full_matrices=False)
    assert float(head.spectral_norm()) >= singular[0] * (1.0 - 1e-12)

    x = np.random.default_rng(seed).uniform(size=(1, weight.shape[0]))
    y = x + 0.1 * left[:, 0][None]
    ratio = np.linalg.norm(head(y).numpy() - head(x).numpy()) / np.linalg.norm(y - x)
    assert ratio <= 1.0 + 1e-12


def test_spectral_gradient_flows_to_weight(rng):
    layer = SpectralLinear(6, 3, seed=2, dtype="float64")
    x = tf.constant(rng.normal(size=(4, 6)))
    with tf.GradientTape() as tape:
        loss = tf.reduce_sum(tf.square(layer(x, training=True)))
    grad = tape.gradient(loss, layer.weight)
    assert grad is not None and np.all(np.isfinite(grad.numpy()))


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.3])
def test_q_rescaling_leaves_dense_output_unchanged(rng, scale):
    layer = SllDense(6, 9, seed=3, dtype="float64")
    layer.log_q.assign(rng.normal(size=9))
    layer.bias.assign(rng.normal(size=9) * 0.1)
    x = tf.constant(rng.normal(size=(5, 6)))
    base = sll_dense(x, layer.weight, layer.bias, layer.q, layer.epsilon).numpy()
    scaled = sll_dense(x, layer.weight, layer.bias, layer.q * scale, layer.epsilon).numpy()
    np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-12)


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.3])
def test_q_rescaling_leaves_conv_output_unchanged(rng, scale):
    layer = SllConv2D(3, 4, 3, seed=4, dtype="float64")
    layer.log_q.assign(rng.normal(size=4))
    x = tf.constant(rng.uniform(size=(2, 3, 6, 6)))
    base = sll_conv(x, layer.kernel, layer.bias, layer.q, layer.epsilon).numpy()
    scaled = sll_conv(x, layer.kernel, layer.bias, layer.q * scale, layer.epsilon).numpy()
    np.testing.assert_allclose(scaled, base, rtol=0, atol=1e-12)


def test_spectral_linear_updates_u_only_when_training(rng):
    layer = SpectralLinear(8, 4, power_iterations=1, seed=2, dtype="float64")
    before = layer.u_vector.numpy().copy()
    layer(rng.normal(size=(2, 8)))
    np.testing.assert_array_equal(layer.u_vector.numpy(), before)
    layer(rng.normal(size=(2, 8)), training=True)
    assert not np.array_equal(layer.u_vector.numpy(), before)


def test_projection_nearest_point():
    np.testing.assert_allclose(project_unit_ball(tf.constant([[3.0, 4.0]], tf.float64)).numpy(), [[0.6, 0.8]])
    np.testing.assert_array_equal(project_unit_ball(tf.constant([[0.3, 0.4]], tf.float64)).numpy(), [[0.3, 0.4]])


def test_projection_at_zero_is_finite():
    np.testing.assert_array_equal(project_unit_ball(tf.zeros((1, 3), tf.float64)).numpy(), 0.0)


def test_projection_is_idempotent_and_non_expansive(rng):
    a = rng.normal(size=(10_000, 5)) * rng.uniform(0.0, 3.0, size=(10_000, 1))
    b = rng.normal(size=(10_000, 5)) * rng.uniform(0.0, 3.0, size=(10_000, 1))
    pa = project_unit_ball(tf.constant(a)).numpy()
    pb = project_unit_ball(tf.constant(b)).numpy()
    np.testing.assert_allclose(project_unit_ball(tf.constant(pa)).numpy(), pa, rtol=0, atol=1e-15)
    assert np.all(np.linalg.norm(pa - pb, axis=1) <= np.linalg.norm(a - b, axis=1) + 1e-12)


def test_extractor_embeddings_lie_in_unit_ball(tiny_model, rng):
    embeddings, pre_norms = tiny_model.embed(rng.uniform(size=(5, 3, 8, 8)))
    assert embeddings.shape == (5, 8)
    assert np.all(np.linalg.norm(embeddings.numpy(), axis=1) <= 1.0 + 1e-12)
    assert pre_norms.shape == (5,)


def test_extractor_rejects_wrong_input_shape(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model.embed(np.zeros((1, 3, 16, 16)))


def test_extractor_is_one_lipschitz(tiny_config, rng):
    model = build_extractor(tiny_config.model_copy(update={"dense_layers": 2}), seed=9, project=False)
    assert lipschitz_ratio(lambda x: model.features(x).numpy(), (3, 8, 8), 1_000, rng) <= 1.0 + 1e-9


def test_identity_extractor(identity_model, rng):
    x = rng.uniform(size=(2, 3, 2, 2))
    embeddings, _ = identity_model.embed(x)
    np.testing.assert_array_equal(embeddings.numpy(), x.reshape(2, -1))
    assert identity_model.embed_dim == 12


def test_mismatched_stack_is_rejected():
    with pytest.raises(ConfigurationError):
        FeatureExtractor([keras.layers.Flatten(), SllDense(5, 2)], (3, 2, 2))


def test_check_parameters_flags_nan(tiny_model):
    layer = tiny_model.lipschitz_layers()[0]
    values = layer.kernel.numpy()
    values.flat[0] = np.nan
    layer.kernel.assign(values)
    with pytest.raises(ParameterError):
        tiny_model.check_parameters()


def test_architecture_defaults_follow_environment_settings():
    config = ModelConfig()
    assert config.image_size == settings.IMAGE_SIZE
    assert config.embed_dim == settings.EMBED_DIM
    assert config.power_iterations == settings.POWER_ITERATIONS
    assert config.epsilon == settings.SLL_EPSILON
    assert config.dtype == settings.CERTSIM_DTYPE


def test_build_extractor_passes_numeric_settings_to_layers(tiny_config):
    model = build_extractor(tiny_config.model_copy(update={"power_iterations": 7, "epsilon": 1e-6}), seed=0)
    head = model.blocks[-1]
    assert head.power_iterations == 7
    assert all(layer.epsilon == 1e-6 for layer in model.lipschitz_layers() if layer is not head)
