import json

import numpy as np
import pytest
import tensorflow as tf

from app.data.embeddings import EmbeddingStore, SyntheticTeacher, TeacherMetric, build_teacher_store
from app.data.manifest import load_dataset, read_manifest
from app.data.retrieval import RetrievalIndex, build_index, rank, retrieve
from app.data.synthetic import generate_synthetic
from app.errors import ConfigurationError, DataError, FormatError
from app.services.metric import pixel_decisions


def test_labels_follow_severity(synthetic_dir):
    for entry in read_manifest(synthetic_dir / "manifest.jsonl"):
        assert entry.y == (1 if entry.severity1 < entry.severity0 else 0)
        low, high = sorted((entry.severity0, entry.severity1))
        assert high >= 1.3 * low


def test_generation_is_deterministic(tmp_path):
    generate_synthetic(4, 8, seed=3, out_dir=tmp_path / "a")
    generate_synthetic(4, 8, seed=3, out_dir=tmp_path / "b")
    for path in sorted((tmp_path / "a").rglob("*")):
        if path.is_file():
            assert path.read_bytes() == (tmp_path / "b" / path.relative_to(tmp_path / "a")).read_bytes()


def test_pixel_baseline_solves_synthetic_set(tmp_path):
    generate_synthetic(60, 16, seed=11, out_dir=tmp_path / "syn")
    data = load_dataset(tmp_path / "syn" / "manifest.jsonl")
    assert np.mean(pixel_decisions(data.x, data.x0, data.x1) == data.y) > 0.9


def test_images_in_unit_range(dataset):
    assert dataset.x.dtype == np.float32
    assert dataset.x.shape == (12, 3, 8, 8)
    for images in (dataset.x, dataset.x0, dataset.x1):
        assert images.min() >= 0.0 and images.max() <= 1.0


def test_generate_rejects_tiny_images(tmp_path):
    with pytest.raises(ConfigurationError):
        generate_synthetic(2, 4, seed=0, out_dir=tmp_path)


def test_manifest_rejects_duplicates(synthetic_dir):
    path = synthetic_dir / "manifest.jsonl"
    first = path.read_text().splitlines()[0]
    path.write_text(first + "\n" + first + "\n")
    with pytest.raises(DataError, match="duplicate id"):
        read_manifest(path)


def test_manifest_rejects_bad_label(synthetic_dir):
    path = synthetic_dir / "manifest.jsonl"
    entry = json.loads(path.read_text().splitlines()[0])
    entry["y"] = 2
    path.write_text(json.dumps(entry) + "\n")
    with pytest.raises(DataError, match=":1:"):
        read_manifest(path)


def test_manifest_missing_image(synthetic_dir):
    (synthetic_dir / "images" / "syn-00003_x1.lstn").unlink()
    with pytest.raises(DataError, match="syn-00003"):
        load_dataset(synthetic_dir / "manifest.jsonl")


def test_store_round_trip(tmp_path, rng):
    vectors = {f"id{i}": rng.normal(size=4) for i in range(5)}
    EmbeddingStore(vectors).save(tmp_path / "store.lsem")
    restored = EmbeddingStore.load(tmp_path / "store.lsem")
    assert restored.dim == 4
    assert restored.ids == list(vectors)
    for key, vector in vectors.items():
        assert restored.get(key).tobytes() == vector.tobytes()


def test_store_bad_magic(tmp_path, rng):
    EmbeddingStore({"a": rng.normal(size=2)}).save(tmp_path / "store.lsem")
    data = (tmp_path / "store.lsem").read_bytes()
    (tmp_path / "store.lsem").write_bytes(b"JUNK" + data[4:])
    with pytest.raises(FormatError):
        EmbeddingStore.load(tmp_path / "store.lsem")


def test_store_rejects_mixed_dimensions(rng):
    with pytest.raises(DataError):
        EmbeddingStore({"a": rng.normal(size=2), "b": rng.normal(size=3)})


def test_synthetic_teacher_is_deterministic(dataset):
    a = SyntheticTeacher(dataset.image_shape, dim=32, seed=5).embed(dataset.x)
    b = SyntheticTeacher(dataset.image_shape, dim=32, seed=5).embed(dataset.x)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (12, 32)
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 2.0, rtol=1e-12)


def test_unscaled_teacher_keeps_tanh_range(dataset):
    raw = SyntheticTeacher(dataset.image_shape, dim=32, seed=5, norm=0.0).embed(dataset.x)
    assert np.abs(raw).max() < 1.0


def test_teacher_metric_matches_teacher_and_is_differentiable(dataset):
    teacher = SyntheticTeacher(dataset.image_shape, dim=8, seed=2)
    view = TeacherMetric(teacher)
    x = tf.constant(dataset.x[:3], tf.float64)
    with tf.GradientTape() as tape:
        tape.watch(x)
        embeddings, pre_norms = view.embed(x)
        total = tf.reduce_sum(embeddings[:, 0])
    np.testing.assert_allclose(embeddings.numpy(), teacher.embed(dataset.x[:3]), atol=1e-12)
    np.testing.assert_allclose(pre_norms.numpy(), 2.0, rtol=1e-12)
    assert not view.project
    assert np.any(tape.gradient(total, x).numpy() != 0.0)


def test_teacher_store_missing_id_is_named(dataset, tmp_path):
    store = build_teacher_store(dataset, "synthetic", expected_dim=8)
    partial = {key: store.get(key) for key in dataset.ids if key != "syn-00004"}
    EmbeddingStore(partial).save(tmp_path / "teacher.lsem")
    with pytest.raises(DataError, match="syn-00004"):
        build_teacher_store(dataset, str(tmp_path / "teacher.lsem"), expected_dim=8)


def test_teacher_store_dimension_mismatch(dataset, tmp_path):
    build_teacher_store(dataset, "synthetic", expected_dim=6).save(tmp_path / "teacher.lsem")
    with pytest.raises(ConfigurationError):
        build_teacher_store(dataset, str(tmp_path / "teacher.lsem"), expected_dim=8)


def test_self_retrieval(tiny_model, dataset):
    index = build_index(tiny_model, dataset.ids, dataset.x)
    hits = retrieve(index, tiny_model, dataset.x[3], topk=1)
    assert hits[0][0] == dataset.ids[3]
    assert hits[0][1] <= 1e-9


def test_full_ranking_is_sorted_permutation(tiny_model, dataset):
    index = build_index(tiny_model, dataset.ids, dataset.x)
    hits = retrieve(index, tiny_model, dataset.x0[0], topk=len(dataset))
    assert sorted(key for key, _ in hits) == sorted(dataset.ids)
    distances = [d for _, d in hits]
    assert distances == sorted(distances)
    embedding, _ = tiny_model.extract(dataset.x0[0])
    for key, value in hits:
        expected = index.distances(embedding)[index.ids.index(key)]
        assert abs(value - expected) <= 1e-12


def test_ties_broken_by_id():
    index = RetrievalIndex(["b", "a", "c"], np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    assert [key for key, _ in rank(index, np.array([1.0, 0.0]), 3)] == ["a", "b", "c"]


def test_index_embeddings_are_unit(tiny_model, dataset, tmp_path):
    index = build_index(tiny_model, dataset.ids, dataset.x)
    index.save(tmp_path / "index.lsem")
    restored = RetrievalIndex.load(tmp_path / "index.lsem")
    assert np.all(np.abs(np.linalg.norm(restored.embeddings, axis=1) - 1.0) <= 1e-9)


def test_empty_index_and_bad_topk(tiny_model, dataset):
    with pytest.raises(ConfigurationError):
        retrieve(RetrievalIndex([], np.zeros((0, 8))), tiny_model, dataset.x[0], topk=1)
    index = build_index(tiny_model, dataset.ids[:2], dataset.x[:2])
    with pytest.raises(ConfigurationError):
        retrieve(index, tiny_model, dataset.x[0], topk=3)
