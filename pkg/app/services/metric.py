"""Cosine perceptual distance, 2AFC classifiers, margins and certificates."""
from typing import List, Optional, Sequence, Tuple

import numpy as np
import tensorflow as tf

from app.core.tensor import l2_norm
from app.errors import DegenerateEmbeddingError
from app.models.models import Certificate, RobustnessGap, Triplet
from app.network.extractor import FeatureExtractor

DEGENERATE_NORM = 1e-12
DEGENERATE_GAP = 1e-12


def cosine_distance(a: tf.Tensor, b: tf.Tensor) -> tf.Tensor:
    """Row-wise ``1 - cos(a, b)``."""
    a = tf.math.l2_normalize(a, axis=-1, epsilon=1e-30)
    b = tf.math.l2_normalize(b, axis=-1, epsilon=1e-30)
    return 1.0 - tf.reduce_sum(a * b, axis=-1)


def _require_nondegenerate(*embeddings: tf.Tensor) -> None:
    for embedding in embeddings:
        smallest = float(tf.reduce_min(tf.norm(embedding, axis=-1)))
        if smallest < DEGENERATE_NORM:
            raise DegenerateEmbeddingError(f"Embedding norm {smallest:.3e} is below {DEGENERATE_NORM}")


def embed_triplets(f: FeatureExtractor, x, x0, x1, training: bool = False):
    """One forward pass over the stacked batch; returns three (embedding, pre_norm) pairs."""
    x = tf.convert_to_tensor(x)
    batch = tf.concat([x, tf.convert_to_tensor(x0, dtype=x.dtype), tf.convert_to_tensor(x1, dtype=x.dtype)], 0)
    embeddings, pre_norms = f.embed(batch, training=training)
    e, e0, e1 = tf.split(embeddings, 3, axis=0)
    n, n0, n1 = tf.split(pre_norms, 3, axis=0)
    return (e, n), (e0, n0), (e1, n1)


def triplet_logits(e: tf.Tensor, e0: tf.Tensor, e1: tf.Tensor) -> tf.Tensor:
    """Soft classifier H = [d(x, x1), d(x, x0)], shape [batch, 2]."""
    return tf.stack([cosine_distance(e, e1), cosine_distance(e, e0)], axis=1)


def decisions_from_logits(logits) -> np.ndarray:
    logits = np.asarray(logits)
    # ties go to 1: h = 1 iff d(x, x1) <= d(x, x0)
    return (logits[:, 0] <= logits[:, 1]).astype(np.int64)


def margins_from_logits(logits: tf.Tensor, y) -> tf.Tensor:
    """M = H_y - H_{1-y}."""
    sign = 2.0 * tf.cast(y, logits.dtype) - 1.0
    return sign * (logits[:, 1] - logits[:, 0])


def margins(f: FeatureExtractor, x, x0, x1, y, training: bool = False) -> tf.Tensor:
    (e, _), (e0, _), (e1, _) = embed_triplets(f, x, x0, x1, training=training)
    return margins_from_logits(triplet_logits(e, e0, e1), y)


def hinge_losses(margin_values: tf.Tensor, m: float) -> tf.Tensor:
    return tf.nn.relu(m - margin_values)


def distance(f: FeatureExtractor, a, b) -> float:
    """d(a, b) = 1 - S_c(f(a), f(b)), in [0, 2]."""
    embeddings, _ = f.embed(np.stack([np.asarray(a), np.asarray(b)]))
    _require_nondegenerate(embeddings)
    return float(cosine_distance(embeddings[:1], embeddings[1:])[0])


def classify(f: FeatureExtractor, t: Triplet) -> Tuple[np.ndarray, int]:
    (e, _), (e0, _), (e1, _) = embed_triplets(f, t.x[None], t.x0[None], t.x1[None])
    _require_nondegenerate(e, e0, e1)
    logits = triplet_logits(e, e0, e1).numpy()
    return logits[0], int(decisions_from_logits(logits)[0])


def margin(f: FeatureExtractor, t: Triplet) -> float:
    logits, _ = classify(f, t)
    return float(margins_from_logits(tf.constant(logits[None]), [t.y])[0])


def hinge_loss(f: FeatureExtractor, t: Triplet, m: float) -> float:
    return max(0.0, m - margin(f, t))


def make_certificate(margin_value: float, gap: float, pre_norms: Sequence[float], correct: bool,
                     id: str = "") -> Certificate:
    """Apply the certified-radius rule R = max(0, M) / ||f(x0) - f(x1)||."""
    degenerate = gap <= DEGENERATE_GAP
    radius = margin_value / gap if margin_value > 0 and not degenerate else 0.0
    valid = all(n >= 1.0 for n in pre_norms) and not degenerate
    return Certificate(
        id=id,
        margin=margin_value,
        gap=gap,
        radius=radius,
        correct=correct,
        valid=valid,
        degenerate_gap=degenerate,
        generic_radius=max(0.0, margin_value) / 2.0,
    )


def certify_batch(f: FeatureExtractor, x, x0, x1, y, ids: Optional[Sequence[str]] = None) -> List[Certificate]:
    (e, n), (e0, n0), (e1, n1) = embed_triplets(f, x, x0, x1)
    _require_nondegenerate(e, e0, e1)
    logits = triplet_logits(e, e0, e1)
    margin_values = margins_from_logits(logits, y).numpy()
    gaps = tf.norm(e0 - e1, axis=-1).numpy()
    correct = decisions_from_logits(logits.numpy()) == np.asarray(y)
    pre = np.stack([n.numpy(), n0.numpy(), n1.numpy()], axis=1)
    ids = list(ids) if ids is not None else [""] * len(margin_values)
    return [
        make_certificate(float(margin_values[i]), float(gaps[i]), pre[i].tolist(), bool(correct[i]), ids[i])
        for i in range(len(margin_values))
    ]


def certify(f: FeatureExtractor, t: Triplet) -> Certificate:
    return certify_batch(f, t.x[None], t.x0[None], t.x1[None], [t.y], [t.id])[0]


def robustness_gap(f: FeatureExtractor, a, b, delta) -> RobustnessGap:
    """Both sides of |d(a, b) - d(a + delta, b)| <= ||delta||_2."""
    a = np.asarray(a)
    delta = np.asarray(delta, dtype=a.dtype)
    embeddings, pre_norms = f.embed(np.stack([a, a + delta, np.asarray(b)]))
    _require_nondegenerate(embeddings)
    d_clean = cosine_distance(embeddings[0:1], embeddings[2:3])[0]
    d_shift = cosine_distance(embeddings[1:2], embeddings[2:3])[0]
    return RobustnessGap(
        lhs=float(tf.abs(d_clean - d_shift)),
        rhs=float(l2_norm(delta)),
        verifiable=f.project and bool(np.all(pre_norms.numpy() >= 1.0)),
    )


def pixel_distance(a, b) -> float:
    """Raw-pixel l2 distance, the baseline the learned metric is compared against."""
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64)))


def pixel_decisions(x, x0, x1) -> np.ndarray:
    """2AFC decisions of the raw-pixel l2 baseline."""
    d0 = np.array([pixel_distance(a, b) for a, b in zip(x, x0)])
    d1 = np.array([pixel_distance(a, b) for a, b in zip(x, x1)])
    return (d1 <= d0).astype(np.int64)
