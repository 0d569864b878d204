"""Exact nearest-neighbour retrieval over unit-normalized embeddings."""
import logging
from typing import List, Sequence, Tuple

import numpy as np

from app.data.embeddings import EmbeddingStore
from app.errors import ConfigurationError, DataError, DegenerateEmbeddingError

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-9


def _unit_rows(embeddings: np.ndarray) -> np.ndarray:
    embeddings = np.asarray(embeddings, dtype=np.float64)
    lengths = np.linalg.norm(embeddings, axis=1, keepdims=True)
    if np.any(lengths < 1e-12):
        raise DegenerateEmbeddingError("Cannot index an embedding with zero norm")
    return embeddings / lengths


class RetrievalIndex:
    """Corpus of ``(id, embedding)`` pairs with every embedding on the unit sphere."""

    def __init__(self, ids: Sequence[str], embeddings: np.ndarray):
        ids = list(ids)
        if len(set(ids)) != len(ids):
            raise DataError("Retrieval index ids must be unique")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2:
            embeddings = embeddings.reshape(len(ids), -1)
        if len(embeddings) != len(ids):
            raise DataError(f"{len(ids)} ids for {len(embeddings)} embeddings")
        if ids and np.max(np.abs(np.linalg.norm(embeddings, axis=1) - 1.0)) > UNIT_TOLERANCE:
            embeddings = _unit_rows(embeddings)
        self.ids = ids
        self.embeddings = embeddings

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1]) if len(self) else 0

    def distances(self, query_embedding: np.ndarray) -> np.ndarray:
        """Cosine distance from one embedding to every corpus entry."""
        query = _unit_rows(np.asarray(query_embedding).reshape(1, -1))[0]
        return 1.0 - self.embeddings @ query

    def save(self, path) -> None:
        EmbeddingStore({key: self.embeddings[i] for i, key in enumerate(self.ids)}, dim=self.dim).save(path)

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        store = EmbeddingStore.load(path)
        ids = store.ids
        return cls(ids, store.matrix(ids) if ids else np.zeros((0, store.dim)))


def build_index(f, ids: Sequence[str], images: np.ndarray, batch_size: int = 64) -> RetrievalIndex:
    """Embed a corpus of images with ``f`` and normalize the result."""
    if len(ids) != len(images):
        raise DataError(f"{len(ids)} ids for {len(images)} images")
    chunks = [f.embed(images[start:start + batch_size])[0].numpy() for start in range(0, len(images), batch_size)]
    embeddings = np.concatenate(chunks) if chunks else np.zeros((0, f.embed_dim))
    index = RetrievalIndex(ids, _unit_rows(embeddings) if len(embeddings) else embeddings)
    logger.info("✅ Built retrieval index with %d entries", len(index))
    return index


def rank(index: RetrievalIndex, query_embedding: np.ndarray, topk: int) -> List[Tuple[str, float]]:
    if len(index) == 0:
        raise ConfigurationError("Retrieval index is empty")
    if not 1 <= topk <= len(index):
        raise ConfigurationError(f"topk must be between 1 and {len(index)}, got {topk}")
    dist = index.distances(query_embedding)
    order = np.lexsort((np.asarray(index.ids), dist))[:topk]
    return [(index.ids[i], float(dist[i])) for i in order]


def retrieve(index: RetrievalIndex, f, query: np.ndarray, topk: int = 5) -> List[Tuple[str, float]]:
    """Ranked ``(id, distance)`` pairs, nearest first, ties broken by id."""
    if len(index) == 0:
        raise ConfigurationError("Retrieval index is empty")
    embedding, _ = f.extract(query)
    return rank(index, embedding, topk)
