import logging
import os
import time
from typing import Dict, Optional

import numpy as np

from app.config import IMAGE_SIZE, INDEX_PATH as DEFAULT_INDEX_PATH, MODEL_PATH as DEFAULT_MODEL_PATH
from app.data.images import decode_image_bytes
from app.data.retrieval import RetrievalIndex, retrieve
from app.errors import ConfigurationError, CertSimError
from app.models.models import (
    CertifyResponse,
    DistanceResponse,
    RetrievalHit,
    RetrievalResponse,
    Triplet,
)
from app.network.checkpoint import load_model
from app.network.extractor import FeatureExtractor
from app.services.metric import certify, classify, distance

logger = logging.getLogger(__name__)


class MetricService:
    """Loaded perceptual metric (and optional retrieval index) behind the HTTP API."""

    def __init__(self, model_path: str | None = None, index_path: str | None = None):
        self.model: Optional[FeatureExtractor] = None
        self.index: Optional[RetrievalIndex] = None
        self.model_path = model_path or DEFAULT_MODEL_PATH
        self.index_path = index_path if index_path is not None else DEFAULT_INDEX_PATH
        self.load(self.model_path, self.index_path)

    def load(self, model_path: str, index_path: str = "") -> None:
        """Load the checkpoint and index; a missing file leaves the service unloaded."""
        try:
            if os.path.exists(model_path):
                self.model = load_model(model_path)
            else:
                logger.warning("❌ Model file not found: %s", model_path)
                logger.warning("Train a model first: certsim train --config ... --data ... --out %s", model_path)
            if index_path:
                if os.path.exists(index_path):
                    self.index = RetrievalIndex.load(index_path)
                    logger.info("✅ Retrieval index loaded from %s (%d entries)", index_path, len(self.index))
                else:
                    logger.warning("❌ Index file not found: %s", index_path)
        except CertSimError as e:
            logger.error("❌ Error loading metric: %s", e)

    def use(self, model: FeatureExtractor, index: Optional[RetrievalIndex] = None) -> None:
        self.model = model
        self.index = index

    def _require_model(self) -> FeatureExtractor:
        if self.model is None:
            raise ConfigurationError("Model not loaded. Please ensure the model file exists.")
        return self.model

    @property
    def image_size(self) -> int:
        return self.model.image_shape[-1] if self.model is not None else IMAGE_SIZE

    def decode(self, image_data: bytes) -> np.ndarray:
        return decode_image_bytes(image_data, self.image_size)

    def distance(self, a: bytes, b: bytes) -> DistanceResponse:
        model = self._require_model()
        x, y = self.decode(a), self.decode(b)
        _, norm_a = model.extract(x)
        _, norm_b = model.extract(y)
        return DistanceResponse(distance=distance(model, x, y), embedding_norms=(norm_a, norm_b))

    def certify(self, reference: bytes, x0: bytes, x1: bytes, label: Optional[int] = None) -> CertifyResponse:
        model = self._require_model()
        triplet = Triplet(x=self.decode(reference), x0=self.decode(x0), x1=self.decode(x1),
                          y=1 if label is None else label, id="request")
        logits, decision = classify(model, triplet)
        if label is None:
            # certify the model's own decision
            triplet = triplet.model_copy(update={"y": decision})
        return CertifyResponse(decision=decision, logits=(float(logits[0]), float(logits[1])),
                               certificate=certify(model, triplet))

    def retrieve(self, query: bytes, topk: int = 5) -> RetrievalResponse:
        model = self._require_model()
        if self.index is None:
            raise ConfigurationError("No retrieval index loaded. Set INDEX_PATH to an index built with build-index.")
        start = time.time()
        hits = retrieve(self.index, model, self.decode(query), topk)
        logger.info("🔎 Retrieved top-%d in %.3fs", topk, time.time() - start)
        return RetrievalResponse(hits=[RetrievalHit(id=key, distance=value) for key, value in hits])

    def get_model_info(self) -> Dict:
        if self.model is None:
            return {"loaded": False, "model_path": self.model_path}
        return {
            "loaded": True,
            "model_path": self.model_path,
            "input_shape": list(self.model.image_shape),
            "embed_dim": self.model.embed_dim,
            "dtype": self.model.dtype_tag,
            "project": self.model.project,
            "index_entries": len(self.index) if self.index is not None else 0,
        }


# Global metric instance
metric_service = MetricService()
