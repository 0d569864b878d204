"""Teacher embedding stores.

File layout: ``b"LSEM"``, version byte, dtype byte (LSTN codes), 2 padding
bytes, u64 count, u64 dimension, ``count`` fixed-stride little-endian records,
then the id table as a UTF-8 JSON list running to the end of the file.
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
import tensorflow as tf

from app.config import EMBED_DIM
from app.errors import ConfigurationError, DataError, FormatError, TensorIOError

logger = logging.getLogger(__name__)

MAGIC = b"LSEM"
VERSION = 1
HEADER = struct.Struct("<4sBB2xQQ")
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class EmbeddingStore:
    """Immutable map from sample id to a k-dimensional vector."""

    def __init__(self, vectors: Dict[str, np.ndarray], dim: int | None = None):
        if dim is None:
            if not vectors:
                raise DataError("Cannot infer dimension of an empty embedding store")
            dim = len(next(iter(vectors.values())))
        self.dim = int(dim)
        self._vectors: Dict[str, np.ndarray] = {}
        for key, vector in vectors.items():
            vector = np.asarray(vector)
            if vector.shape != (self.dim,):
                raise DataError(f"Embedding {key!r} has shape {vector.shape}, expected ({self.dim},)")
            self._vectors[key] = vector

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: str) -> bool:
        return key in self._vectors

    @property
    def ids(self) -> List[str]:
        return list(self._vectors)

    def get(self, key: str) -> np.ndarray:
        try:
            return self._vectors[key]
        except KeyError:
            raise DataError(f"Missing teacher embedding for sample id {key!r}") from None

    def matrix(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(key) for key in ids])

    def missing(self, ids: Iterable[str]) -> List[str]:
        return [key for key in ids if key not in self._vectors]

    def save(self, path) -> None:
        ids = self.ids
        dtype = np.result_type(*self._vectors.values()) if ids else np.dtype(np.float64)
        code = _CODE_FOR.get(np.dtype(dtype), 2)
        records = np.stack([self._vectors[key] for key in ids]).astype(_CODES[code]) if ids else np.zeros((0, self.dim))
        payload = HEADER.pack(MAGIC, VERSION, code, len(ids), self.dim) + records.tobytes()
        Path(path).write_bytes(payload + json.dumps(ids).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "EmbeddingStore":
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError as e:
            raise TensorIOError(f"Embedding store not found: {path}") from e
        if len(data) < HEADER.size:
            raise TensorIOError(f"Truncated embedding store header in {path}")
        magic, version, code, count, dim = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"Bad embedding store magic {magic!r}", offset=0)
        if version != VERSION:
            raise FormatError(f"Unsupported embedding store version {version}", offset=4)
        if code not in _CODES:
            raise FormatError(f"Unknown dtype code {code}", offset=5)
        dtype = _CODES[code]
        nbytes = count * dim * dtype.itemsize
        if len(data) < HEADER.size + nbytes:
            raise TensorIOError(f"Truncated embedding records in {path}")
        records = np.frombuffer(data, dtype=dtype, count=count * dim, offset=HEADER.size)
        records = records.reshape(count, dim).astype(dtype.newbyteorder("="))
        try:
            ids = json.loads(data[HEADER.size + nbytes:].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Embedding store id table is not valid JSON: {e}", offset=HEADER.size + nbytes) from e
        if len(ids) != count or len(set(ids)) != count:
            raise FormatError(f"Id table lists {len(ids)} ids for {count} records", offset=HEADER.size + nbytes)
        return cls({key: records[i] for i, key in enumerate(ids)}, dim=dim)


class SyntheticTeacher:
    """Frozen random projection followed by tanh.

    Every output row is rescaled to l2 norm ``norm``; ``norm=0`` keeps the raw
    tanh values.
    """

    def __init__(self, input_shape: Sequence[int], dim: int = 32, seed: int = 0, gain: float = 4.0,
                 norm: float = 2.0):
        rng = np.random.default_rng([seed, dim])
        features = int(np.prod(input_shape))
        self.input_shape = tuple(input_shape)
        self.dim = dim
        self.norm = float(norm)
        self.projection = rng.normal(0.0, gain / np.sqrt(features), (features, dim))
        self.bias = rng.normal(0.0, 0.5, dim)

    def embed_tensor(self, images) -> tf.Tensor:
        """Differentiable embedding of a batch, in float64."""
        images = tf.cast(tf.convert_to_tensor(images), tf.float64)
        flat = tf.reshape(images, (tf.shape(images)[0], -1)) - 0.5
        z = tf.tanh(tf.linalg.matmul(flat, self.projection) + self.bias)
        if self.norm > 0:
            z = self.norm * tf.math.l2_normalize(z, axis=-1)
        return z

    def embed(self, images: np.ndarray) -> np.ndarray:
        return self.embed_tensor(np.asarray(images, dtype=np.float64)).numpy()


class TeacherMetric:
    """The synthetic teacher behind the extractor interface used by scoring and attacks."""

    project = False

    def __init__(self, teacher: SyntheticTeacher):
        self.teacher = teacher
        self.image_shape = teacher.input_shape
        self.embed_dim = teacher.dim

    def embed(self, x, training: bool = False):
        z = self.teacher.embed_tensor(x)
        return z, tf.norm(z, axis=-1)


def build_teacher_store(dataset, teacher: str = "synthetic", expected_dim: int | None = None,
                        seed: int = 0) -> EmbeddingStore:
    """Embeddings of every reference image, from a store file or the synthetic teacher."""
    if teacher == "synthetic":
        dim = expected_dim or EMBED_DIM
        embedder = SyntheticTeacher(dataset.image_shape, dim=dim, seed=seed)
        vectors = embedder.embed(dataset.x)
        store = EmbeddingStore({key: vectors[i] for i, key in enumerate(dataset.ids)}, dim=dim)
        logger.info("✅ Synthetic teacher embedded %d images (k=%d)", len(store), dim)
    else:
        store = EmbeddingStore.load(teacher)
        missing = store.missing(dataset.ids)
        if missing:
            raise DataError(f"Teacher store {teacher} is missing embeddings for ids: {', '.join(missing)}")
        logger.info("✅ Loaded teacher store %s (%d vectors, k=%d)", teacher, len(store), store.dim)
    if expected_dim is not None and store.dim != expected_dim:
        raise ConfigurationError(f"Teacher embedding dimension {store.dim} != student embed_dim {expected_dim}")
    return store
