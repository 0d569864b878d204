import numpy as np
import pytest

from app.errors import FormatError, TensorIOError
from app.network.checkpoint import load_model, save_model
from app.network.extractor import build_extractor


def test_round_trip_is_bit_exact(tiny_model, rng, tmp_path):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    restored = load_model(path)
    x = rng.uniform(size=(4, 3, 8, 8))
    assert restored.embed(x)[0].numpy().tobytes() == tiny_model.embed(x)[0].numpy().tobytes()
    assert restored.project == tiny_model.project
    assert restored.embed_dim == tiny_model.embed_dim


def test_same_seed_same_bytes(tiny_config, tmp_path):
    save_model(build_extractor(tiny_config, seed=3), tmp_path / "a.ckpt")
    save_model(build_extractor(tiny_config, seed=3), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_bad_magic(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(FormatError) as info:
        load_model(path)
    assert info.value.offset == 0


def test_missing_blobs_are_named(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    data = path.read_bytes()
    params = list(tiny_model.parameter_tensors())
    last_blob = 11 + 8 * params[-1][1].numpy().ndim + params[-1][1].numpy().nbytes
    path.write_bytes(data[:-last_blob])
    with pytest.raises(FormatError, match=f"only {len(params) - 1} blobs"):
        load_model(path)


def test_partial_blob(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    save_model(tiny_model, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TensorIOError):
        load_model(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(TensorIOError):
        load_model(tmp_path / "missing.ckpt")
