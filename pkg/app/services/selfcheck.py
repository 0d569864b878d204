"""Fast property suites run by ``certsim selfcheck``.

Each check returns a ``CheckResult``; the command exits 0 only when all pass.
"""
import logging
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List

import numpy as np
import tensorflow as tf

from app.core.lstn import decode_tensor, encode_tensor
from app.core.tensor import grad_check, l2_norm, matmul
from app.models.models import ModelConfig
from app.network.checkpoint import load_model, save_model
from app.network.extractor import build_extractor
from app.network.layers import SllConv2D, SllDense, conv_scaling, project_unit_ball, sll_conv
from app.services.metric import embed_triplets, margins_from_logits, triplet_logits

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5
NETWORK_GRAD_TOLERANCE = 1e-4
LIPSCHITZ_SLACK = 1e-9
EQUIVALENCE_TOLERANCE = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def tiny_config() -> ModelConfig:
    return ModelConfig(image_size=8, channels=3, conv_layers=2, conv_inner=4, dense_layers=2, dense_inner=16,
                       embed_dim=8, power_iterations=50)


def conv_as_matrix(kernel: np.ndarray, size: int) -> np.ndarray:
    """Explicit [h*s*s, c*s*s] matrix of a stride-1 circular cross-correlation (im2col form)."""
    h, c, k, _ = kernel.shape
    radius = k // 2
    matrix = np.zeros((h, size, size, c, size, size))
    for p in range(size):
        for q in range(size):
            for u in range(k):
                for v in range(k):
                    matrix[:, p, q, :, (p + u - radius) % size, (q + v - radius) % size] += kernel[:, :, u, v]
    return matrix.reshape(h * size * size, c * size * size)


def sll_conv_oracle(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, q: np.ndarray, epsilon: float) -> np.ndarray:
    """Convolutional SLL written as a dense SLL over the im2col matrix."""
    h = kernel.shape[0]
    size = x.shape[-1]
    matrix = conv_as_matrix(kernel, size)
    t = conv_scaling(tf.constant(kernel), tf.constant(q), epsilon).numpy()
    flat = x.reshape(len(x), -1)
    z = np.maximum(flat @ matrix.T + np.repeat(bias, size * size), 0.0) / np.repeat(t, size * size)
    return (flat - 2.0 * z @ matrix).reshape(x.shape)


def lipschitz_ratio(fn: Callable[[np.ndarray], np.ndarray], shape, pairs: int, rng: np.random.Generator) -> float:
    """Largest ||fn(x) - fn(y)|| / ||x - y|| over random near and far pairs."""
    x = rng.uniform(0.0, 1.0, (pairs,) + tuple(shape))
    scales = np.where(np.arange(pairs) % 2 == 0, 1e-3, 1.0).reshape((pairs,) + (1,) * len(shape))
    y = x + scales * rng.normal(size=x.shape)
    fx = np.asarray(fn(x)).reshape(pairs, -1)
    fy = np.asarray(fn(y)).reshape(pairs, -1)
    ratios = np.linalg.norm(fx - fy, axis=1) / np.linalg.norm((x - y).reshape(pairs, -1), axis=1)
    return float(ratios.max())


def check_gradients(rng: np.random.Generator, points: int = 5) -> CheckResult:
    dense = SllDense(6, 5, seed=1, dtype="float64")
    conv = SllConv2D(2, 3, 3, seed=2, dtype="float64")
    fixed = tf.constant(rng.normal(size=(4, 3)))
    functions = {
        "matmul": (lambda x: tf.reduce_sum(tf.sin(matmul(x, fixed))), (2, 4)),
        "l2_norm": (lambda x: l2_norm(x), (3, 4)),
        "sll_dense": (lambda x: tf.reduce_sum(tf.sin(dense(x))), (2, 6)),
        "sll_conv": (lambda x: tf.reduce_sum(tf.sin(conv(x))), (1, 2, 4, 4)),
        "projection": (lambda x: tf.reduce_sum(tf.sin(project_unit_ball(x))), (2, 5)),
    }
    worst = {}
    for name, (fn, shape) in functions.items():
        worst[name] = max(grad_check(fn, tf.constant(rng.normal(size=shape) * 2.0)) for _ in range(points))

    model = build_extractor(ModelConfig(image_size=4, channels=2, conv_layers=1, conv_inner=2, dense_layers=1,
                                        dense_inner=4, embed_dim=3), seed=3)
    refs = tf.constant(rng.uniform(size=(2, 2, 4, 4)))
    labels = [1, 0]

    def objective(x):
        (e, _), (e0, _), (e1, _) = embed_triplets(model, x, refs, refs[::-1])
        return tf.reduce_sum(margins_from_logits(triplet_logits(e, e0, e1), labels))

    network = max(grad_check(objective, tf.constant(rng.uniform(size=(2, 2, 4, 4)))) for _ in range(2))
    passed = all(value <= GRAD_TOLERANCE for value in worst.values()) and network <= NETWORK_GRAD_TOLERANCE
    detail = ", ".join(f"{k}={v:.2e}" for k, v in worst.items()) + f", margin={network:.2e}"
    return CheckResult("gradients", passed, detail)


def check_lipschitz(rng: np.random.Generator, pairs: int = 200) -> CheckResult:
    dense = SllDense(12, 16, seed=4, dtype="float64")
    conv = SllConv2D(3, 4, 3, seed=5, dtype="float64")
    model = build_extractor(tiny_config(), seed=6, project=False)
    ratios = {
        "sll_dense": lipschitz_ratio(lambda x: dense(x).numpy(), (12,), pairs, rng),
        "sll_conv": lipschitz_ratio(lambda x: conv(x).numpy(), (3, 8, 8), pairs, rng),
        "extractor": lipschitz_ratio(lambda x: model.features(x).numpy(), (3, 8, 8), pairs, rng),
    }
    passed = all(value <= 1.0 + LIPSCHITZ_SLACK for value in ratios.values())
    return CheckResult("lipschitz", passed, ", ".join(f"{k}={v:.12f}" for k, v in ratios.items()))


def check_conv_equivalence(rng: np.random.Generator) -> CheckResult:
    layer = SllConv2D(3, 4, 3, seed=7, dtype="float64")
    layer.bias.assign(rng.normal(size=4) * 0.1)
    layer.log_q.assign(rng.normal(size=4) * 0.3)
    x = rng.uniform(size=(2, 3, 8, 8))
    ours = sll_conv(tf.constant(x), layer.kernel, layer.bias, layer.q, layer.epsilon).numpy()
    oracle = sll_conv_oracle(x, layer.kernel.numpy(), layer.bias.numpy(), layer.q.numpy(), layer.epsilon)
    diff = float(np.max(np.abs(ours - oracle)))
    return CheckResult("conv_equivalence", diff <= EQUIVALENCE_TOLERANCE, f"max_abs_diff={diff:.2e}")


def check_projection(rng: np.random.Generator, count: int = 500) -> CheckResult:
    a = rng.normal(size=(count, 6)) * 3.0
    b = rng.normal(size=(count, 6)) * 3.0
    pa = project_unit_ball(tf.constant(a)).numpy()
    pb = project_unit_ball(tf.constant(b)).numpy()
    inside = bool(np.all(np.linalg.norm(pa, axis=1) <= 1.0 + 1e-12))
    expansion = float(np.max(np.linalg.norm(pa - pb, axis=1) - np.linalg.norm(a - b, axis=1)))
    kept = bool(np.allclose(project_unit_ball(tf.constant(a * 1e-3)).numpy(), a * 1e-3))
    passed = inside and kept and expansion <= 1e-12
    return CheckResult("projection", passed, f"max_expansion={expansion:.2e}")


def check_formats(rng: np.random.Generator) -> CheckResult:
    problems: List[str] = []
    for dtype in (np.float32, np.float64):
        array = rng.normal(size=(2, 3, 4)).astype(dtype)
        decoded, _ = decode_tensor(encode_tensor(array))
        if decoded.dtype != array.dtype or decoded.tobytes() != array.tobytes():
            problems.append(f"LSTN {np.dtype(dtype).name}")

    model = build_extractor(tiny_config(), seed=8)
    x = rng.uniform(size=(3, 3, 8, 8))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_model(model, path)
        restored = load_model(path)
        if restored.embed(x)[0].numpy().tobytes() != model.embed(x)[0].numpy().tobytes():
            problems.append("checkpoint")
    return CheckResult("formats", not problems, "round-trips bit-exact" if not problems else ", ".join(problems))


CHECKS = (check_gradients, check_lipschitz, check_conv_equivalence, check_projection, check_formats)


def run_selfcheck(seed: int = 0) -> List[CheckResult]:
    results = []
    for check in CHECKS:
        result = check(np.random.default_rng(seed))
        if result.passed:
            logger.info("✅ %s: %s", result.name, result.detail)
        else:
            logger.error("❌ %s: %s", result.name, result.detail)
        results.append(result)
    return results
