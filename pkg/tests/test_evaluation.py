import numpy as np
import pytest

from app.data.embeddings import SyntheticTeacher, TeacherMetric
from app.data.manifest import TripletDataset
from app.data.retrieval import build_index
from app.errors import ConfigurationError, SoundnessViolation
from app.models.models import AttackConfig, Radius
from app.services.evaluation import (
    certified_fraction,
    certify_dataset,
    check_sandwich,
    distance_histogram,
    embedding_shifts,
    empirical_score,
    evaluate,
    excluded_invalid_fraction,
    falsify_certificates,
    natural_score,
    pixel_baseline_score,
    displacement_violations,
    retrieval_attack,
)
from app.services.selfcheck import lipschitz_ratio


def test_reference_as_distortion_scores_one(tiny_model, dataset):
    easy = TripletDataset(ids=dataset.ids, x=dataset.x, x0=dataset.x0, x1=dataset.x.copy(),
                          y=np.ones(len(dataset), dtype=np.int64))
    assert natural_score(tiny_model, easy) == 1.0


def test_empty_dataset_is_rejected(tiny_model, dataset):
    with pytest.raises(ConfigurationError):
        natural_score(tiny_model, dataset.subset([]))


def test_threads_do_not_change_scores(tiny_model, dataset):
    assert natural_score(tiny_model, dataset, threads=1) == natural_score(tiny_model, dataset, threads=3)


def test_certified_score_is_monotone(tiny_model, dataset):
    certificates = certify_dataset(tiny_model, dataset)
    scores = [certified_fraction(certificates, rho) for rho in (0.0, 36 / 255, 72 / 255, 108 / 255)]
    assert scores == sorted(scores, reverse=True)
    correct_valid = sum(c.correct and c.valid for c in certificates) / len(certificates)
    assert scores[0] == pytest.approx(correct_valid)
    largest = max(max(c.margin for c in certificates), 0.0)
    assert certified_fraction(certificates, 2.0 * largest / min(c.gap for c in certificates) + 1.0) == 0.0


def test_excluded_fraction_counts_correct_but_invalid(tiny_model, dataset):
    certificates = certify_dataset(tiny_model, dataset)
    expected = sum(c.correct and not c.valid for c in certificates) / len(certificates)
    assert excluded_invalid_fraction(certificates) == expected


def test_zero_budget_empirical_equals_natural(tiny_model, dataset):
    assert empirical_score(tiny_model, dataset, AttackConfig(epsilon=0.0)) == natural_score(tiny_model, dataset)


def test_histogram_counts(tiny_model, dataset):
    zero = distance_histogram(tiny_model, dataset.x, AttackConfig(epsilon=0.0, objective="embed_mse"), bins=10)
    assert sum(zero.counts) == len(dataset)
    assert zero.counts[0] == len(dataset)
    assert len(zero.edges) == 11 and zero.edges[0] == 0.0 and zero.edges[-1] == 2.0
    with pytest.raises(ConfigurationError):
        distance_histogram(tiny_model, dataset.x, AttackConfig(objective="embed_mse"), bins=1)


def test_embedding_shift_respects_input_shift(trained):
    images = trained.test.x
    cfg = AttackConfig(epsilon=0.5, steps=20, objective="embed_mse")
    distances, lengths, verifiable = embedding_shifts(trained.model, images, cfg, trained.test.ids)
    assert np.sum(verifiable) > 0
    assert np.all(lengths <= 0.5 + 1e-9)
    assert np.all(distances[verifiable] <= lengths[verifiable] + 1e-9)
    assert displacement_violations(distances, lengths, verifiable) == 0


def test_sandwich_violation_is_raised():
    with pytest.raises(SoundnessViolation):
        check_sandwich(0.5, {"36/255": 0.6}, {"36/255": 0.55})


def test_falsification_finds_nothing(trained):
    certificates = certify_dataset(trained.model, trained.test)
    assert sum(c.valid for c in certificates) > 0
    assert falsify_certificates(trained.model, trained.test, certificates, steps=20, restarts=2) == []


def test_report_is_deterministic(tiny_model, dataset):
    radii = [Radius.parse("72/255"), Radius.parse("36/255")]
    kwargs = dict(radii=radii, attack=AttackConfig(steps=5), bins=8, falsify=False)
    first = evaluate(tiny_model, dataset, **kwargs)
    second = evaluate(tiny_model, dataset, **kwargs)
    assert first.model_dump_json() == second.model_dump_json()
    assert [r.label for r in first.radii] == ["36/255", "72/255"]
    assert sum(first.histogram.counts) == len(dataset)
    assert first.displacement_violations == 0
    for label in ("36/255", "72/255"):
        assert first.certified[label] <= first.empirical[label] <= first.natural
    assert first.pixel_baseline_natural == pixel_baseline_score(dataset)


def test_retrieval_attack_reports_rank_change(tiny_model, dataset):
    index = build_index(tiny_model, dataset.ids, dataset.x)
    clean, attacked = retrieval_attack(tiny_model, index, dataset.x[0], epsilon=2.0, topk=3, steps=10)
    assert clean.hits[0].id == dataset.ids[0]
    assert len(attacked.hits) == 3
    assert attacked.rank1_changed == (attacked.hits[0].id != dataset.ids[0])


@pytest.mark.slow
def test_trained_metric_stays_one_lipschitz(trained, rng):
    model = trained.model
    assert lipschitz_ratio(lambda x: model.features(x).numpy(), (3, 8, 8), 5_000, rng) <= 1.0 + 1e-9
    assert lipschitz_ratio(lambda x: model(x).numpy(), (3, 8, 8), 5_000, rng) <= 1.0 + 1e-9


@pytest.mark.slow
def test_no_certified_decision_flips_on_held_out_triplets(tmp_path, tiny_config):
    from app.data.embeddings import build_teacher_store
    from app.data.manifest import load_dataset
    from app.data.synthetic import generate_synthetic
    from app.models.models import TrainConfig
    from app.services.training import train

    generate_synthetic(160, 8, seed=53, out_dir=tmp_path / "syn")
    data = load_dataset(tmp_path / "syn" / "manifest.jsonl")
    train_set, held_out = data.subset(range(120)), data.subset(range(120, 160))
    config = TrainConfig(distill_epochs=20, finetune_epochs=20, batch_size=16, distill_learning_rate=1e-2,
                         finetune_learning_rate=1e-3, validation_fraction=0.0, architecture=tiny_config, seed=3)
    model, _ = train(config, train_set, build_teacher_store(train_set, "synthetic", expected_dim=8, seed=3))

    certificates = certify_dataset(model, held_out)
    assert sum(c.valid for c in certificates) > 0
    assert sum(c.valid and c.radius > 0 for c in certificates) > 0
    assert falsify_certificates(model, held_out, certificates, steps=50, restarts=3, fraction=0.99) == []


def test_report_carries_linf_and_teacher_rows(tiny_model, dataset):
    teacher = TeacherMetric(SyntheticTeacher(dataset.image_shape, dim=8, seed=0))
    report = evaluate(tiny_model, dataset, radii=[Radius.parse("36/255")], attack=AttackConfig(steps=3), bins=6,
                      falsify=False, linf_grid=(0.02, 0.01), teacher=teacher)
    assert list(report.empirical_linf) == ["0.01", "0.02"]
    assert all(0.0 <= value <= 1.0 for value in report.empirical_linf.values())
    assert report.teacher.natural == natural_score(teacher, dataset)
    assert list(report.teacher.empirical) == ["36/255"]
    assert sum(report.teacher.histogram.counts) == len(dataset)
    assert 0.0 <= report.teacher.max_shift <= 2.0
    assert 0.0 <= report.max_shift <= 2.0


def test_report_without_teacher_has_no_teacher_row(tiny_model, dataset):
    report = evaluate(tiny_model, dataset, radii=[Radius.parse("36/255")], attack=AttackConfig(steps=2), bins=4,
                      falsify=False, linf_grid=())
    assert report.teacher is None
    assert report.empirical_linf == {}
