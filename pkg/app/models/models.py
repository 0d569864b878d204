from fractions import Fraction
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import CERTSIM_DTYPE, EMBED_DIM, IMAGE_SIZE, POWER_ITERATIONS, SLL_EPSILON


class ModelConfig(BaseModel):
    """Architecture of the 1-Lipschitz feature extractor."""

    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(IMAGE_SIZE, ge=1, validate_default=True)
    channels: int = Field(3, ge=1)
    conv_layers: int = Field(3, ge=0)
    conv_inner: int = Field(16, ge=1)
    kernel_size: int = Field(3, ge=1)
    dense_layers: int = Field(2, ge=0)
    dense_inner: int = Field(256, ge=1)
    embed_dim: int = Field(EMBED_DIM, ge=1, validate_default=True)
    power_iterations: int = Field(POWER_ITERATIONS, ge=1, validate_default=True)
    epsilon: float = Field(SLL_EPSILON, gt=0, validate_default=True)
    dtype: Literal["f32", "f64"] = Field(CERTSIM_DTYPE, validate_default=True)

    @field_validator("kernel_size")
    @classmethod
    def kernel_is_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value


def _parse_range(value):
    if isinstance(value, str):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise ValueError(f"expected 'lo,hi', got {value!r}")
        return tuple(float(p) for p in parts)
    return value


class AugmentationConfig(BaseModel):
    """Color-jitter parameters of the second augmentation pipeline."""

    model_config = ConfigDict(extra="forbid")

    flip_prob: float = Field(0.5, ge=0.0, le=1.0)
    brightness: Tuple[float, float] = (0.7, 1.3)
    contrast: Tuple[float, float] = (0.7, 1.3)
    saturation: Tuple[float, float] = (0.7, 1.3)
    # maximum rotation in the opponent-color plane, radians
    hue_shift: float = Field(0.3, ge=0.0)
    seed: int = 0

    @field_validator("brightness", "contrast", "saturation", mode="before")
    @classmethod
    def parse_range(cls, value):
        return _parse_range(value)

    @field_validator("brightness", "contrast", "saturation")
    @classmethod
    def check_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if lo <= 0 or hi <= 0:
            raise ValueError("jitter ranges must be positive")
        if lo > hi:
            raise ValueError(f"range lower bound {lo} exceeds upper bound {hi}")
        return value


class TrainConfig(BaseModel):
    """Two-step training configuration (flat ``key = value`` file)."""

    model_config = ConfigDict(extra="forbid")

    optimizer: Literal["adam", "sgd"] = "adam"
    learning_rate: Optional[float] = Field(None, gt=0)
    distill_learning_rate: float = Field(1e-3, gt=0)
    finetune_learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(10, ge=0)
    distill_epochs: Optional[int] = Field(None, ge=0)
    finetune_epochs: Optional[int] = Field(None, ge=0)
    hinge_margin: float = Field(0.5, gt=0)
    distill_jitter_weight: float = Field(1.0, ge=0)
    jitter_target: Literal["student", "teacher"] = "student"
    norm_floor: float = Field(1.25, ge=0.0)
    norm_weight: float = Field(1.0, ge=0.0)
    calibrate_head: bool = True
    augment: bool = True
    validation_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    seed: int = 0
    architecture: ModelConfig = Field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)

    def stage_learning_rate(self, stage: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return self.distill_learning_rate if stage == "distill" else self.finetune_learning_rate

    def stage_epochs(self, stage: str) -> int:
        override = self.distill_epochs if stage == "distill" else self.finetune_epochs
        return self.epochs if override is None else override


class AttackConfig(BaseModel):
    norm: Literal["l2", "linf"] = "l2"
    epsilon: float = Field(1.0, ge=0.0)
    steps: int = Field(50, ge=1)
    step_size: Optional[float] = Field(None, gt=0)
    objective: Literal["triplet_ce", "embed_mse"] = "triplet_ce"
    random_init: bool = True
    restarts: int = Field(1, ge=1)
    seed: int = 0

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps


class Triplet(BaseModel):
    """One 2AFC judgment: reference, two distortions and the human label."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y: Literal[0, 1]
    id: str = ""

    @model_validator(mode="after")
    def same_shape(self):
        if not (self.x.shape == self.x0.shape == self.x1.shape):
            raise ValueError(
                f"triplet images differ in shape: {self.x.shape}, {self.x0.shape}, {self.x1.shape}"
            )
        return self

    def swapped(self) -> "Triplet":
        return Triplet(x=self.x, x0=self.x1, x1=self.x0, y=1 - self.y, id=self.id)


class Certificate(BaseModel):
    id: str = ""
    margin: float
    gap: float
    radius: float
    correct: bool
    valid: bool
    degenerate_gap: bool = False
    # radius implied by the generic sqrt(2)-Lipschitz classifier bound
    generic_radius: float = 0.0


class RobustnessGap(BaseModel):
    lhs: float
    rhs: float
    verifiable: bool

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + 1e-9


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    ref_path: str
    x0_path: str
    x1_path: str
    y: Literal[0, 1]
    severity0: Optional[float] = None
    severity1: Optional[float] = None


class EpochRecord(BaseModel):
    stage: Literal["distill", "finetune"]
    epoch: int
    loss: float
    natural_score: Optional[float] = None


class AttackRecord(BaseModel):
    id: str
    epsilon: float
    norm: str
    flipped: bool
    final_loss: float
    final_distance: Optional[float] = None


class Histogram(BaseModel):
    edges: List[float]
    counts: List[int]


class Radius(BaseModel):
    label: str
    value: float

    @classmethod
    def parse(cls, text: str) -> "Radius":
        fraction = Fraction(text.strip())
        if fraction < 0:
            raise ValueError(f"radius must be non-negative, got {text}")
        return cls(label=text.strip().replace(" ", ""), value=float(fraction))


class TeacherReport(BaseModel):
    """The same scores and attacks applied to the unconstrained teacher."""

    natural: float
    empirical: Dict[str, float]
    histogram: Histogram
    max_shift: float


class EvaluationReport(BaseModel):
    natural: float
    certified: Dict[str, float]
    empirical: Dict[str, float]
    empirical_linf: Dict[str, float] = {}
    excluded_invalid_fraction: float
    histogram: Histogram
    max_shift: float = 0.0
    radii: List[Radius]
    pixel_baseline_natural: float
    displacement_violations: int
    falsification_violations: List[str] = []
    teacher: Optional[TeacherReport] = None


# API responses
class DistanceResponse(BaseModel):
    distance: float
    embedding_norms: Tuple[float, float]


class CertifyResponse(BaseModel):
    decision: int
    logits: Tuple[float, float]
    certificate: Optional[Certificate] = None


class RetrievalHit(BaseModel):
    id: str
    distance: float


class RetrievalResponse(BaseModel):
    hits: List[RetrievalHit]
    rank1_changed: Optional[bool] = None
