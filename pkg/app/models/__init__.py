from .models import (
    AttackConfig,
    AttackRecord,
    AugmentationConfig,
    Certificate,
    CertifyResponse,
    DistanceResponse,
    EpochRecord,
    EvaluationReport,
    Histogram,
    ManifestEntry,
    ModelConfig,
    Radius,
    RetrievalHit,
    RetrievalResponse,
    RobustnessGap,
    TrainConfig,
    Triplet,
)

__all__ = [
    "AttackConfig",
    "AttackRecord",
    "AugmentationConfig",
    "Certificate",
    "CertifyResponse",
    "DistanceResponse",
    "EpochRecord",
    "EvaluationReport",
    "Histogram",
    "ManifestEntry",
    "ModelConfig",
    "Radius",
    "RetrievalHit",
    "RetrievalResponse",
    "RobustnessGap",
    "TrainConfig",
    "Triplet",
]
