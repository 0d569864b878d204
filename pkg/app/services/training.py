"""Two-step training: distillation of a teacher embedding into the
1-Lipschitz student, then hinge-loss fine-tuning on 2AFC triplets.
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import keras
import numpy as np
import tensorflow as tf
from dotenv import dotenv_values
from pydantic import ValidationError
from sklearn.model_selection import train_test_split
from tqdm import tqdm

from app.config import CERTSIM_PROGRESS
from app.data.embeddings import EmbeddingStore
from app.data.manifest import TripletDataset, sample_rng
from app.errors import ConfigurationError, DataError
from app.models.models import AugmentationConfig, EpochRecord, TrainConfig
from app.network.extractor import FeatureExtractor, build_extractor
from app.network.layers import SpectralLinear
from app.services.metric import embed_triplets, hinge_losses, margins_from_logits, triplet_logits

logger = logging.getLogger(__name__)

# ITU-R 601 luma weights and the matching RGB <-> YIQ transforms
_LUMA = np.array([0.299, 0.587, 0.114])
_RGB_TO_YIQ = np.array([
    [0.299, 0.587, 0.114],
    [0.595716, -0.274453, -0.321263],
    [0.211456, -0.522591, 0.311135],
])
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def jitter(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip followed by brightness, contrast, saturation and hue jitter.

    Every random draw is made whether or not the factor is used, so the stream
    stays aligned across configurations.
    """
    img = np.asarray(img)
    out = img.astype(np.float64)
    flip = rng.random() < cfg.flip_prob
    brightness = rng.uniform(*cfg.brightness)
    contrast = rng.uniform(*cfg.contrast)
    saturation = rng.uniform(*cfg.saturation)
    angle = rng.uniform(-cfg.hue_shift, cfg.hue_shift)

    if flip:
        out = out[..., ::-1]
    if brightness != 1.0:
        out = out * brightness
    if contrast != 1.0:
        mean = out.mean()
        out = mean + contrast * (out - mean)
    if saturation != 1.0:
        gray = np.tensordot(_LUMA, out, axes=1)[None]
        out = gray + saturation * (out - gray)
    if angle != 0.0:
        cos, sin = np.cos(angle), np.sin(angle)
        rotation = np.array([[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]])
        out = np.tensordot(_YIQ_TO_RGB @ rotation @ _RGB_TO_YIQ, out, axes=1)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def jitter_batch(images: np.ndarray, ids, cfg: AugmentationConfig, seed: int, epoch: int) -> np.ndarray:
    return np.stack([jitter(image, cfg, sample_rng(seed, key, epoch)) for image, key in zip(images, ids)])


def make_optimizer(name: str, learning_rate: float) -> keras.optimizers.Optimizer:
    if name == "adam":
        return keras.optimizers.Adam(learning_rate=learning_rate, beta_1=0.9, beta_2=0.999, epsilon=1e-8)
    if name == "sgd":
        return keras.optimizers.SGD(learning_rate=learning_rate)
    raise ConfigurationError(f"Unknown optimizer: {name}")


def rmse(u: tf.Tensor, v: tf.Tensor) -> tf.Tensor:
    """sqrt(mean((u - v)^2)) with a zero gradient when u == v."""
    mse = tf.reduce_mean(tf.square(u - v))
    positive = mse > 0
    return tf.where(positive, tf.sqrt(tf.where(positive, mse, tf.ones_like(mse))), tf.zeros_like(mse))


def norm_shortfall(pre_norms: tf.Tensor, floor: float) -> tf.Tensor:
    """mean(max(0, floor - ||z||)) over the pre-projection norms of a batch."""
    return tf.reduce_mean(tf.nn.relu(tf.cast(floor, pre_norms.dtype) - pre_norms))


def calibrate_head_bias(student: FeatureExtractor, images: np.ndarray, targets: np.ndarray,
                        chunk: int = 256) -> Optional[np.ndarray]:
    """Set the head offset so the mean student output equals the mean target.

    This is the least-squares bias for the current weights. Returns the new
    bias, or None when the last block has no bias to calibrate.
    """
    head = student.blocks[-1] if student.blocks else None
    if not isinstance(head, SpectralLinear) or len(images) == 0:
        return None
    images = np.asarray(images)
    features = np.concatenate([student.features(images[i:i + chunk]).numpy() for i in range(0, len(images), chunk)])
    bias = head.bias.numpy()
    offset = np.mean(np.asarray(targets, np.float64), axis=0) - np.mean(features - bias, axis=0)
    head.bias.assign(offset.astype(bias.dtype))
    logger.info("🎯 Head offset calibrated (|b| = %.4f)", float(np.linalg.norm(offset)))
    return offset


def _apply(student, optimizer, tape: tf.GradientTape, loss: tf.Tensor) -> None:
    variables = student.trainable_variables
    grads = tape.gradient(loss, variables)
    grads = [tf.zeros_like(v) if g is None else g for g, v in zip(grads, variables)]
    optimizer.apply_gradients(zip(grads, variables))
    check = getattr(student, "check_parameters", None)
    if check is not None:
        check()


def distill_step(student, teacher_embed, x_std, x_jit, weight: float,
                 optimizer: keras.optimizers.Optimizer, jitter_target: str = "student",
                 norm_floor: float = 0.0, norm_weight: float = 0.0) -> float:
    """One update on RMSE(f(x_std), teacher) + weight * RMSE(f(x_jit), target).

    ``target`` is ``f(x_std)`` for ``jitter_target="student"`` and the teacher
    embedding otherwise. A positive ``norm_weight`` adds
    ``norm_weight * norm_shortfall(||f(x)||, norm_floor)`` over both halves.
    """
    if student.project:
        raise ConfigurationError("Distillation runs with the unit-ball projection switched off")
    teacher_embed = tf.convert_to_tensor(teacher_embed)
    if teacher_embed.shape[-1] != student.embed_dim:
        raise ConfigurationError(
            f"Teacher embedding dimension {teacher_embed.shape[-1]} != student embed_dim {student.embed_dim}"
        )
    x_std = np.asarray(x_std)
    with tf.GradientTape() as tape:
        embeddings, pre_norms = student.embed(np.concatenate([x_std, np.asarray(x_jit, dtype=x_std.dtype)]),
                                              training=True)
        z_std, z_jit = tf.split(embeddings, 2, axis=0)
        teacher_embed = tf.cast(teacher_embed, z_std.dtype)
        target = z_std if jitter_target == "student" else teacher_embed
        loss = rmse(z_std, teacher_embed) + weight * rmse(z_jit, target)
        if norm_weight > 0:
            loss = loss + norm_weight * norm_shortfall(pre_norms, norm_floor)
    if float(loss) > 0:
        _apply(student, optimizer, tape, loss)
    return float(loss)


def finetune_step(student: FeatureExtractor, batch: TripletDataset, m: float,
                  optimizer: keras.optimizers.Optimizer, norm_floor: float = 0.0,
                  norm_weight: float = 0.0) -> float:
    """One update on the mean hinge loss max(0, m - M) over ``batch``.

    With a positive ``norm_weight`` the pre-projection norms of all three
    images are held above ``norm_floor``, where certificates are valid.
    """
    if len(batch) == 0:
        raise ConfigurationError("Cannot fine-tune on an empty batch")
    with tf.GradientTape() as tape:
        (e, n), (e0, n0), (e1, n1) = embed_triplets(student, batch.x, batch.x0, batch.x1, training=True)
        margin_values = margins_from_logits(triplet_logits(e, e0, e1), batch.y)
        loss = tf.reduce_mean(hinge_losses(margin_values, m))
        if norm_weight > 0:
            loss = loss + norm_weight * norm_shortfall(tf.concat([n, n0, n1], 0), norm_floor)
    if float(loss) > 0:
        _apply(student, optimizer, tape, loss)
    return float(loss)


def _natural(student: FeatureExtractor, dataset: Optional[TripletDataset]) -> Optional[float]:
    if dataset is None or len(dataset) == 0:
        return None
    from app.services.evaluation import natural_score

    return natural_score(student, dataset)


def _emit(record: EpochRecord, log_path: Optional[Path]) -> None:
    logger.info(
        "📈 %s epoch %d: loss=%.6f%s", record.stage, record.epoch, record.loss,
        "" if record.natural_score is None else f" natural={record.natural_score:.4f}",
    )
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as handle:
            handle.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")


def _epochs(stage: str, count: int):
    return tqdm(range(1, count + 1), desc=stage, unit="epoch", disable=not CERTSIM_PROGRESS or count == 0)


def distill(student: FeatureExtractor, dataset: TripletDataset, store: EmbeddingStore, config: TrainConfig,
            validation: Optional[TripletDataset] = None, log_path: Optional[Path] = None) -> List[EpochRecord]:
    """Step 1: mimic the teacher embeddings of the reference images."""
    missing = store.missing(dataset.ids)
    if missing:
        raise DataError(f"Missing teacher embedding for sample ids: {', '.join(missing)}")
    if store.dim != student.embed_dim:
        raise ConfigurationError(f"Teacher embedding dimension {store.dim} != student embed_dim {student.embed_dim}")
    student.project = False
    optimizer = make_optimizer(config.optimizer, config.stage_learning_rate("distill"))
    targets = store.matrix(dataset.ids)
    if config.calibrate_head and config.stage_epochs("distill") > 0:
        calibrate_head_bias(student, dataset.x, targets)
    records = []
    for epoch in _epochs("distill", config.stage_epochs("distill")):
        order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            index = order[start:start + config.batch_size]
            batch = dataset.subset(index)
            if config.augment:
                x_jit = jitter_batch(batch.x, batch.ids, config.augmentation, config.augmentation.seed, epoch)
            else:
                x_jit = batch.x
            losses.append(distill_step(student, targets[index], batch.x, x_jit, config.distill_jitter_weight,
                                       optimizer, config.jitter_target, config.norm_floor,
                                       config.norm_weight) * len(index))
        record = EpochRecord(stage="distill", epoch=epoch, loss=float(np.sum(losses) / len(dataset)),
                             natural_score=_natural(student, validation))
        _emit(record, log_path)
        records.append(record)
    return records


def finetune(student: FeatureExtractor, dataset: TripletDataset, config: TrainConfig,
             validation: Optional[TripletDataset] = None, log_path: Optional[Path] = None) -> List[EpochRecord]:
    """Step 2: hinge-loss fine-tuning with the projection switched on."""
    student.project = True
    optimizer = make_optimizer(config.optimizer, config.stage_learning_rate("finetune"))
    records = []
    for epoch in _epochs("finetune", config.stage_epochs("finetune")):
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(len(dataset))
        losses = []
        for batch in dataset.batches(config.batch_size, order):
            loss = finetune_step(student, batch, config.hinge_margin, optimizer, config.norm_floor, config.norm_weight)
            losses.append(loss * len(batch))
        record = EpochRecord(stage="finetune", epoch=epoch, loss=float(np.sum(losses) / len(dataset)),
                             natural_score=_natural(student, validation))
        _emit(record, log_path)
        records.append(record)
    return records


def split_dataset(dataset: TripletDataset, fraction: float,
                  seed: int) -> Tuple[TripletDataset, Optional[TripletDataset]]:
    """Hold out ``fraction`` of the triplets for per-epoch validation."""
    n_val = int(round(len(dataset) * fraction))
    if n_val < 1 or len(dataset) - n_val < 1:
        return dataset, None
    train_idx, val_idx = train_test_split(np.arange(len(dataset)), test_size=n_val, random_state=seed, shuffle=True)
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(val_idx))


def seed_everything(seed: int) -> None:
    keras.utils.set_random_seed(seed)
    tf.config.experimental.enable_op_determinism()


def train(config: TrainConfig, dataset: TripletDataset, teacher_store: EmbeddingStore,
          log_path=None, student: Optional[FeatureExtractor] = None) -> Tuple[FeatureExtractor, List[EpochRecord]]:
    """Run distillation then fine-tuning; returns the student and the epoch log."""
    seed_everything(config.seed)
    if len(dataset) == 0:
        raise ConfigurationError("Cannot train on an empty dataset")
    log_path = Path(log_path) if log_path else None
    if log_path is not None:
        log_path.write_text("", encoding="utf-8")

    train_set, validation = split_dataset(dataset, config.validation_fraction, config.seed)
    if student is None:
        student = build_extractor(config.architecture, seed=config.seed, project=False)
    if tuple(student.image_shape) != tuple(dataset.image_shape):
        raise ConfigurationError(
            f"Dataset images {list(dataset.image_shape)} do not match the model input {list(student.image_shape)}"
        )
    held_out = 0 if validation is None else len(validation)
    logger.info("🚀 Training on %d triplets (%d held out)", len(train_set), held_out)

    records = distill(student, train_set, teacher_store, config, validation, log_path)
    records += finetune(student, train_set, config, validation, log_path)
    student.project = True
    student.check_parameters()
    logger.info("✅ Training finished after %d epochs", len(records))
    return student, records


def load_train_config(path) -> TrainConfig:
    """Parse a flat ``key = value`` file; ``arch_*``/``aug_*`` keys feed the nested configs."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Config file not found: {path}")
    values = {key: value for key, value in dotenv_values(path).items() if value is not None}
    top, architecture, augmentation = {}, {}, {}
    for key, value in values.items():
        if key.startswith("arch_"):
            architecture[key[len("arch_"):]] = value
        elif key.startswith("aug_"):
            augmentation[key[len("aug_"):]] = value
        else:
            top[key] = value
    try:
        return TrainConfig(**top, architecture=architecture, augmentation=augmentation)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid training config {path}: {e}") from e