"""Projected-gradient attacks in l2 and l-infinity on the reference image.

Two objectives: cross-entropy of the 2AFC soft classifier (``triplet_ce``)
and squared embedding displacement (``embed_mse``). The returned perturbation
is the best iterate seen over all restarts, the unperturbed start included.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import tensorflow as tf

from app.data.manifest import sample_rng
from app.errors import AttackError, ConfigurationError
from app.models.models import AttackConfig, AttackRecord, Triplet
from app.network.extractor import FeatureExtractor
from app.services.metric import cosine_distance, decisions_from_logits, triplet_logits

logger = logging.getLogger(__name__)


@dataclass
class AttackOutcome:
    delta: np.ndarray
    loss: np.ndarray
    distance: np.ndarray
    flipped: Optional[np.ndarray] = None
    correct_after: Optional[np.ndarray] = None
    # [iterate, sample] losses of every evaluated iterate
    history: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.delta)

    def item(self, index: int) -> "AttackOutcome":
        def pick(value):
            return None if value is None else value[index]

        return AttackOutcome(
            delta=self.delta[index],
            loss=self.loss[index],
            distance=self.distance[index],
            flipped=pick(self.flipped),
            correct_after=pick(self.correct_after),
            history=None if self.history is None else self.history[:, index],
        )


def _sample_axes(delta: np.ndarray):
    return tuple(range(1, delta.ndim))


def project_ball(delta, norm: str, epsilon: float) -> np.ndarray:
    """Nearest point of the epsilon-ball; a 1-D input is a single perturbation."""
    delta = np.asarray(delta, dtype=np.float64)
    if epsilon < 0:
        raise ConfigurationError(f"Attack budget must be non-negative, got {epsilon}")
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm != "l2":
        raise ConfigurationError(f"Unknown attack norm: {norm}")
    if delta.ndim <= 1:
        length = np.linalg.norm(delta)
        return delta * (epsilon / length) if length > epsilon else delta
    lengths = np.sqrt(np.sum(delta ** 2, axis=_sample_axes(delta), keepdims=True))
    scale = np.where(lengths > epsilon, epsilon / np.where(lengths > 0, lengths, 1.0), 1.0)
    return delta * scale


def _random_start(rng: np.random.Generator, shape, norm: str, epsilon: float) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, shape)
    direction = rng.normal(size=shape)
    direction /= max(np.linalg.norm(direction), 1e-300)
    return direction * epsilon * rng.random() ** (1.0 / direction.size)


def _step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(grad)
    lengths = np.sqrt(np.sum(grad ** 2, axis=_sample_axes(grad), keepdims=True))
    return np.where(lengths > 0, grad / np.where(lengths > 0, lengths, 1.0), 0.0)


def _pgd(loss_fn: Callable[[tf.Tensor], tf.Tensor], x: np.ndarray, cfg: AttackConfig,
         keys: Sequence[str], record_history: bool = False):
    """Maximize per-sample ``loss_fn(x + delta)``; returns (best_delta, best_loss, history)."""
    dtype = tf.float64

    def evaluate(delta: np.ndarray):
        point = tf.constant(x + delta, dtype=dtype)
        with tf.GradientTape() as tape:
            tape.watch(point)
            losses = loss_fn(point)
            total = tf.reduce_sum(losses)
        grad = tape.gradient(total, point, unconnected_gradients=tf.UnconnectedGradients.ZERO)
        losses = losses.numpy()
        if not np.all(np.isfinite(losses)):
            bad = [k for k, v in zip(keys, losses) if not np.isfinite(v)]
            raise AttackError(f"Attack objective is not finite for ids {bad}")
        return losses, grad.numpy()

    epsilon = cfg.epsilon
    step = cfg.resolved_step_size()
    best_delta = np.zeros_like(x)
    best_loss, _ = evaluate(best_delta)
    history = [best_loss.copy()]

    def keep(delta, losses):
        improved = losses > best_loss
        best_loss[improved] = losses[improved]
        best_delta[improved] = delta[improved]
        if record_history:
            history.append(losses.copy())

    if epsilon == 0:
        return best_delta, best_loss, np.stack(history) if record_history else None

    for restart in range(cfg.restarts):
        if cfg.random_init:
            delta = np.stack([
                _random_start(sample_rng(cfg.seed, key, restart), x.shape[1:], cfg.norm, epsilon) for key in keys
            ])
        else:
            delta = np.zeros_like(x)
        delta = np.clip(x + project_ball(delta, cfg.norm, epsilon), 0.0, 1.0) - x
        for _ in range(cfg.steps):
            losses, grad = evaluate(delta)
            keep(delta, losses)
            delta = project_ball(delta + step * _step_direction(grad, cfg.norm), cfg.norm, epsilon)
            delta = np.clip(x + delta, 0.0, 1.0) - x
        losses, _ = evaluate(delta)
        keep(delta, losses)
    return best_delta, best_loss, np.stack(history) if record_history else None


def _embedding_distance(f: FeatureExtractor, x: np.ndarray, delta: np.ndarray) -> np.ndarray:
    clean, _ = f.embed(x)
    shifted, _ = f.embed(x + delta)
    return cosine_distance(clean, shifted).numpy()


def _require(cfg: AttackConfig, objective: str) -> None:
    if cfg.objective != objective:
        raise ConfigurationError(f"Attack objective is {cfg.objective!r}, expected {objective!r}")


def attack_triplets(f: FeatureExtractor, x, x0, x1, y, cfg: AttackConfig, ids: Optional[Sequence[str]] = None,
                    record_history: bool = False) -> AttackOutcome:
    """Cross-entropy PGD on the reference images of a batch of triplets."""
    _require(cfg, "triplet_ce")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    keys = list(ids) if ids is not None else [str(i) for i in range(len(x))]
    e0, _ = f.embed(np.asarray(x0, dtype=np.float64))
    e1, _ = f.embed(np.asarray(x1, dtype=np.float64))
    labels = tf.constant(y)

    def loss_fn(point: tf.Tensor) -> tf.Tensor:
        e, _ = f.embed(point)
        logits = triplet_logits(e, e0, e1)
        return tf.nn.sparse_softmax_cross_entropy_with_logits(labels=labels, logits=logits)

    delta, loss, history = _pgd(loss_fn, x, cfg, keys, record_history)

    clean, _ = f.embed(x)
    shifted, _ = f.embed(x + delta)
    before = decisions_from_logits(triplet_logits(clean, e0, e1).numpy())
    after = decisions_from_logits(triplet_logits(shifted, e0, e1).numpy())
    flipped = before != after
    logger.debug("PGD %s eps=%g: %d of %d decisions flipped", cfg.norm, cfg.epsilon, int(np.sum(flipped)), len(x))
    return AttackOutcome(
        delta=delta,
        loss=loss,
        distance=cosine_distance(clean, shifted).numpy(),
        flipped=flipped,
        correct_after=after == y,
        history=history,
    )


def attack_triplet(f: FeatureExtractor, t: Triplet, cfg: AttackConfig, record_history: bool = False) -> AttackOutcome:
    outcome = attack_triplets(f, t.x[None], t.x0[None], t.x1[None], [t.y], cfg, [t.id or "0"], record_history)
    return outcome.item(0)


def attack_embeddings(f: FeatureExtractor, x, cfg: AttackConfig, ids: Optional[Sequence[str]] = None,
                      record_history: bool = False) -> AttackOutcome:
    """PGD on mean squared embedding displacement ||f(x + delta) - f(x)||^2 / k."""
    _require(cfg, "embed_mse")
    x = np.asarray(x, dtype=np.float64)
    keys = list(ids) if ids is not None else [str(i) for i in range(len(x))]
    anchor, _ = f.embed(x)

    def loss_fn(point: tf.Tensor) -> tf.Tensor:
        e, _ = f.embed(point)
        return tf.reduce_mean(tf.square(e - anchor), axis=-1)

    delta, loss, history = _pgd(loss_fn, x, cfg, keys, record_history)
    return AttackOutcome(delta=delta, loss=loss, distance=_embedding_distance(f, x, delta), history=history)


def attack_embedding(f: FeatureExtractor, x, cfg: AttackConfig, record_history: bool = False) -> AttackOutcome:
    return attack_embeddings(f, np.asarray(x)[None], cfg, record_history=record_history).item(0)


def to_records(outcome: AttackOutcome, ids: Sequence[str], cfg: AttackConfig) -> List[AttackRecord]:
    flipped = outcome.flipped if outcome.flipped is not None else np.zeros(len(outcome), dtype=bool)
    return [
        AttackRecord(
            id=key,
            epsilon=cfg.epsilon,
            norm=cfg.norm,
            flipped=bool(flipped[i]),
            final_loss=float(outcome.loss[i]),
            final_distance=float(outcome.distance[i]),
        )
        for i, key in enumerate(ids)
    ]
