from .checkpoint import load_model, save_model
from .extractor import FeatureExtractor, build_extractor
from .layers import (
    SllConv2D,
    SllDense,
    SpectralLinear,
    conv_scaling,
    dense_scaling,
    project_unit_ball,
    sll_conv,
    sll_dense,
)

__all__ = [
    "FeatureExtractor",
    "SllConv2D",
    "SllDense",
    "SpectralLinear",
    "build_extractor",
    "conv_scaling",
    "dense_scaling",
    "load_model",
    "project_unit_ball",
    "save_model",
    "sll_conv",
    "sll_dense",
]
