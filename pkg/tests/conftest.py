from typing import NamedTuple

import keras
import numpy as np
import pytest

from app.data.embeddings import build_teacher_store
from app.data.manifest import TripletDataset, load_dataset
from app.data.synthetic import generate_synthetic
from app.models.models import ModelConfig, TrainConfig
from app.network.extractor import FeatureExtractor, build_extractor

TINY = dict(image_size=8, channels=3, conv_layers=2, conv_inner=4, dense_layers=1, dense_inner=16, embed_dim=8)


class TrainedMetric(NamedTuple):
    model: FeatureExtractor
    train: TripletDataset
    test: TripletDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_config):
    return build_extractor(tiny_config, seed=0)


@pytest.fixture
def identity_model():
    """Bare flatten stack: f(x) = x, projection off."""
    return FeatureExtractor([keras.layers.Flatten(dtype="float64")], (3, 2, 2), project=False, dtype="float64")


@pytest.fixture
def synthetic_dir(tmp_path):
    generate_synthetic(12, 8, seed=7, out_dir=tmp_path / "syn")
    return tmp_path / "syn"


@pytest.fixture
def dataset(synthetic_dir) -> TripletDataset:
    return load_dataset(synthetic_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def trained(tmp_path_factory) -> TrainedMetric:
    """Tiny metric after both training steps, with a held-out split."""
    from app.services.training import train

    root = tmp_path_factory.mktemp("trained")
    generate_synthetic(60, 8, seed=41, out_dir=root / "syn")
    data = load_dataset(root / "syn" / "manifest.jsonl")
    train_set, test_set = data.subset(range(40)), data.subset(range(40, 60))
    config = TrainConfig(distill_epochs=30, finetune_epochs=20, batch_size=8, distill_learning_rate=1e-2,
                         finetune_learning_rate=1e-3, validation_fraction=0.0, augment=False,
                         architecture=ModelConfig(**TINY), seed=0)
    store = build_teacher_store(train_set, "synthetic", expected_dim=TINY["embed_dim"])
    model, _ = train(config, train_set, store)
    return TrainedMetric(model=model, train=train_set, test=test_set)
